"""Segmentation metrics, sliding-window evaluation, shape-choice scoring,
informative-dot difficulty, psychometric fitting, and report emission."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .dataset import load_masks, load_video, read_manifest
from .segmentation import SegNet, predict_mask, seg_forward
from .sources import HALF_WINDOW, valid_target_frames

__all__ = [
    "EvalRow",
    "Segmenter",
    "iou",
    "f_score",
    "evaluate_video",
    "zero_shot_eval",
    "choose_shape",
    "count_informative_dots",
    "PsychometricFit",
    "fit_psychometric",
    "evaluate_shape_trials",
    "emit_report",
    "aggregate",
]


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    tp, fp, fn = _counts(pred, gt)
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def f_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pixelwise F1 = 2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    tp, fp, fn = _counts(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass
class EvalRow:
    model: str
    condition: str
    video: str
    frame: int
    iou: float
    f_score: float


class Segmenter:
    """A frozen motion source plus a trained head; maps videos to masks."""

    def __init__(self, source, net: SegNet, name: str = "model"):
        self.source = source
        self.net = net
        self.name = name

    def predict_logits(self, frames: np.ndarray, video_dir=None) -> np.ndarray:
        """(T, H, W) frames -> (T - 8, H, W) logits for frames 4 .. T-5."""
        feats = self.source.features_video(np.asarray(frames), video_dir)
        out = [
            seg_forward([scale[i] for scale in feats], self.net)
            for i in range(feats[0].shape[0])
        ]
        return np.stack(out)

    def predict_frame(self, frames: np.ndarray, t: int, video_dir=None) -> np.ndarray:
        feats = self.source.features_frames(np.asarray(frames), [t], video_dir)
        return seg_forward([scale[0] for scale in feats], self.net)


def evaluate_video(
    segmenter: Segmenter,
    frames: np.ndarray,
    gt_masks: np.ndarray,
    condition: str = "original",
    video_name: str = "video",
    video_dir=None,
) -> list[EvalRow]:
    """Shifting-window evaluation over target frames t in [4, T-5].

    The first and last four frames are excluded so the 9-frame input
    window is always fully contained; a T-frame video yields T-8 rows.
    """
    frames = np.asarray(frames)
    targets = list(valid_target_frames(len(frames)))
    logits = segmenter.predict_logits(frames, video_dir)
    rows = []
    for i, t in enumerate(targets):
        pred = predict_mask(logits[i])
        rows.append(
            EvalRow(
                model=segmenter.name,
                condition=condition,
                video=video_name,
                frame=t,
                iou=iou(pred, gt_masks[t]),
                f_score=f_score(pred, gt_masks[t]),
            )
        )
    return rows


def zero_shot_eval(
    segmenter: Segmenter, manifest: str | Path, dots_subdir: str = "dots"
) -> list[EvalRow]:
    """Paired evaluation of test videos and their random-dot counterparts.

    Both conditions use the same frozen model and the same ground-truth
    masks; the dot stimuli must have been generated beforehand from the
    ground-truth flow (missing counterparts are an error).
    """
    splits = read_manifest(manifest)
    if not splits.get("test"):
        raise ValueError("manifest has no test videos")
    rows: list[EvalRow] = []
    for vdir in splits["test"]:
        masks = load_masks(vdir)
        original = load_video(vdir)
        if not (Path(vdir) / dots_subdir).is_dir():
            raise FileNotFoundError(
                f"{vdir} has no '{dots_subdir}' directory; generate dot stimuli first"
            )
        dot_frames = load_video(vdir, dots_subdir)
        name = Path(vdir).name
        rows += evaluate_video(segmenter, original, masks, "original", name, vdir)
        rows += evaluate_video(segmenter, dot_frames, masks, "random_dots", name, vdir)
    return rows


def choose_shape(
    pred: np.ndarray,
    target: np.ndarray,
    distractor: np.ndarray,
    rng: np.random.Generator | None = None,
) -> str:
    """Pick the option whose mask better matches the prediction by IoU.

    Exact ties (including an empty prediction against two nonempty
    options) are broken uniformly at random with the provided generator.
    """
    iou_t = iou(pred, target)
    iou_d = iou(pred, distractor)
    if iou_t > iou_d:
        return "target"
    if iou_d > iou_t:
        return "distractor"
    rng = rng or np.random.default_rng()
    return "target" if rng.random() < 0.5 else "distractor"


def count_informative_dots(
    dots_xy: np.ndarray, target_mask: np.ndarray, distractor_mask: np.ndarray
) -> int:
    """Dots inside exactly one of the two masks (their symmetric difference).

    A dot at subpixel (x, y) is tested against the nearest pixel;
    out-of-frame dots count as outside both masks.
    """
    target_mask = np.asarray(target_mask, dtype=bool)
    distractor_mask = np.asarray(distractor_mask, dtype=bool)
    sym = target_mask ^ distractor_mask
    h, w = sym.shape
    dots_xy = np.asarray(dots_xy, dtype=np.float64).reshape(-1, 2)
    col = np.round(dots_xy[:, 0]).astype(int)
    row = np.round(dots_xy[:, 1]).astype(int)
    ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    return int(sym[row[ok], col[ok]].sum())


@dataclass
class PsychometricFit:
    alpha: float  # threshold: difficulty at 75% accuracy
    beta: float  # slope scale
    converged: bool
    identifiable: bool


def _psychometric(x: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """2AFC accuracy model: chance 0.5 rising to 1.0 with difficulty x."""
    return 0.5 + 0.5 * expit((x - alpha) / beta)


def fit_psychometric(bins: list[tuple[float, int, int]]) -> PsychometricFit:
    """Binomial MLE of (alpha, beta) for accuracy-vs-difficulty data.

    ``bins``: (difficulty, n_correct, n_total) per level; at least two
    distinct levels.  Degenerate data (all levels fully correct, or no
    level above chance) is flagged non-identifiable and not fitted.
    """
    if len({b[0] for b in bins}) < 2:
        raise ValueError("need at least two distinct difficulty levels")
    x = np.array([b[0] for b in bins], dtype=np.float64)
    k = np.array([b[1] for b in bins], dtype=np.float64)
    n = np.array([b[2] for b in bins], dtype=np.float64)
    if np.any(n < 1) or np.any(k > n) or np.any(k < 0):
        raise ValueError("bad bin counts")

    rate = k / n
    if np.all(k == n) or np.all(rate <= 0.5):
        return PsychometricFit(np.nan, np.nan, converged=False, identifiable=False)

    span = float(x.max() - x.min())

    def nll(params):
        a, log_b = params
        p = np.clip(_psychometric(x, a, np.exp(log_b)), 1e-12, 1 - 1e-12)
        return -(k * np.log(p) + (n - k) * np.log(1 - p)).sum()

    best = None
    for a0 in np.linspace(x.min(), x.max(), 5):
        for b0 in (span / 10, span / 3):
            res = minimize(
                nll,
                np.array([a0, np.log(b0)]),
                method="L-BFGS-B",
                bounds=[(x.min() - 2 * span, x.max() + 2 * span), (np.log(1e-3), np.log(10 * span))],
            )
            if best is None or res.fun < best.fun:
                best = res
    alpha = float(best.x[0])
    beta = float(np.exp(best.x[1]))
    return PsychometricFit(alpha, beta, converged=bool(best.success), identifiable=True)


def evaluate_shape_trials(
    segmenter: Segmenter, bank_dir: str | Path, seed: int = 0
) -> dict:
    """Run the 2AFC shape-identification task with a model observer.

    For every bank trial the model segments the dot stimulus at the last
    fully-windowed frame and picks the option whose final-position mask
    better matches the prediction.  Returns per-trial records, overall
    accuracy, a one-sided binomial p-value against chance, and a
    psychometric fit over informative-dot difficulty bins.
    """
    from scipy.stats import binomtest

    from .trial_bank import load_trial, trial_dirs

    rng = np.random.default_rng(seed)
    records = []
    for tdir in trial_dirs(bank_dir):
        trial = load_trial(tdir)
        frames = trial["frames"]
        t_last = len(frames) - 1 - HALF_WINDOW
        logits = segmenter.predict_frame(frames, t_last)
        pred = predict_mask(logits)
        choice = choose_shape(pred, trial["target_mask"], trial["distractor_mask"], rng)
        records.append(
            {
                "trial": tdir.name,
                "choice": choice,
                "correct": choice == trial["meta"]["correct_choice"],
                "informative_dots": trial["meta"].get("informative_dots"),
            }
        )
    n = len(records)
    k = sum(r["correct"] for r in records)
    test = binomtest(k, n, 0.5, alternative="greater")
    out = {
        "records": records,
        "n_trials": n,
        "n_correct": k,
        "accuracy": k / n,
        "p_value_vs_chance": float(test.pvalue),
    }
    by_dots: dict[int, list[bool]] = {}
    for r in records:
        if r["informative_dots"] is not None:
            by_dots.setdefault(int(r["informative_dots"]), []).append(r["correct"])
    bins = sorted((float(x), sum(fl), len(fl)) for x, fl in by_dots.items())
    if len(bins) >= 2:
        fit = fit_psychometric(bins)
        out["psychometric"] = fit
        out["bins"] = bins
    return out


CSV_COLUMNS = ("model", "condition", "video", "frame", "iou", "f_score")


def emit_report(rows: list[EvalRow], csv_path: str | Path | None = None) -> str:
    """Write per-frame rows as CSV and return an aggregate summary table.

    Rows are emitted in a deterministic order (model, condition, video,
    frame); the summary lists mean IoU / F-score per model and condition.
    """
    if not rows:
        raise ValueError("no evaluation rows")
    rows = sorted(rows, key=lambda r: (r.model, r.condition, r.video, r.frame))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for r in rows:
                w.writerow([r.model, r.condition, r.video, r.frame,
                            f"{r.iou:.6f}", f"{r.f_score:.6f}"])
    return aggregate(rows)


def aggregate(rows: list[EvalRow]) -> str:
    """Aligned text table of mean metrics per (model, condition)."""
    groups: dict[tuple[str, str], list[EvalRow]] = {}
    for r in rows:
        groups.setdefault((r.model, r.condition), []).append(r)
    out = io.StringIO()
    name_w = max(len("model"), *(len(m) for m, _ in groups))
    cond_w = max(len("condition"), *(len(c) for _, c in groups))
    print(f"{'model':<{name_w}}  {'condition':<{cond_w}}  {'iou':>8}  {'f_score':>8}  {'frames':>6}", file=out)
    for (model, cond) in sorted(groups):
        rs = groups[(model, cond)]
        mean_iou = float(np.mean([r.iou for r in rs]))
        mean_f = float(np.mean([r.f_score for r in rs]))
        print(f"{model:<{name_w}}  {cond:<{cond_w}}  {mean_iou:>8.4f}  {mean_f:>8.4f}  {len(rs):>6}", file=out)
    return out.getvalue()


def read_rows_csv(csv_path: str | Path) -> list[EvalRow]:
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            EvalRow(
                model=d["model"],
                condition=d["condition"],
                video=d["video"],
                frame=int(d["frame"]),
                iou=float(d["iou"]),
                f_score=float(d["f_score"]),
            )
            for d in reader
        ]
