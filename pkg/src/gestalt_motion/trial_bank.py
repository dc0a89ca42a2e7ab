"""On-disk bank of pre-generated shape-identification trials.

Layout::

    bank_dir/
      bank.json                  # generation config echo
      trials/t00000/
        frames/00000.png ...     # dot stimulus frames
        target.png               # clean centered rendering (displayed option)
        distractor.png
        target_mask.png          # shapes at the final stimulus position
        distractor_mask.png      # (reference masks for model evaluation)
        meta.json

The service serves these as static assets; model evaluation consumes
the final-position masks directly.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .dots import ShapeTrial, ShapeTrialConfig, make_shape_trial
from .evaluation import count_informative_dots
from .shapes import rasterize_shape

__all__ = ["write_trial_bank", "write_trial", "load_trial", "trial_dirs"]


def _save_png(path: Path, values: np.ndarray):
    img = np.clip(np.round(np.asarray(values, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def _load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def write_trial(trial: ShapeTrial, trial_dir: Path):
    frames_dir = trial_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for t in range(trial.stimulus.num_frames):
        _save_png(frames_dir / f"{t:05d}.png", trial.stimulus.frames[t])

    h, w = trial.masks.shape[1:]
    center = (w / 2.0, h / 2.0)
    _save_png(trial_dir / "target.png", rasterize_shape(trial.target, (h, w), center))
    _save_png(trial_dir / "distractor.png", rasterize_shape(trial.distractor, (h, w), center))

    target_mask = trial.final_target_mask
    distractor_mask = trial.final_distractor_mask()
    _save_png(trial_dir / "target_mask.png", target_mask)
    _save_png(trial_dir / "distractor_mask.png", distractor_mask)

    meta = trial.metadata()
    meta["informative_dots"] = count_informative_dots(
        trial.final_dots, target_mask, distractor_mask
    )
    (trial_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def write_trial_bank(
    out_dir: str | Path,
    count: int,
    config: ShapeTrialConfig | None = None,
    seed: int = 0,
) -> Path:
    """Generate ``count`` seeded trials under ``out_dir``; returns bank.json."""
    config = config or ShapeTrialConfig()
    out_dir = Path(out_dir)
    (out_dir / "trials").mkdir(parents=True, exist_ok=True)
    for i in range(count):
        trial = make_shape_trial(seed + i, config)
        write_trial(trial, out_dir / "trials" / f"t{i:05d}")
    bank = {
        "count": count,
        "seed": seed,
        "frame_size": list(config.frame_size),
        "duration_frames": config.duration_frames,
        "frame_rate": config.frame_rate,
        "num_dots": config.dots.num_dots,
        "dot_lifetime": config.dots.lifetime,
        "dot_radius": config.dots.radius,
        "speed": list(config.speed),
    }
    path = out_dir / "bank.json"
    path.write_text(json.dumps(bank, indent=2))
    return path


def trial_dirs(bank_dir: str | Path) -> list[Path]:
    return sorted(p for p in (Path(bank_dir) / "trials").iterdir() if p.is_dir())


def load_trial(trial_dir: str | Path) -> dict:
    """Stimulus frames, final-position masks, and metadata for one trial."""
    trial_dir = Path(trial_dir)
    frame_paths = sorted((trial_dir / "frames").glob("*.png"))
    frames = np.stack([_load_png(p) for p in frame_paths])
    return {
        "frames": frames,
        "target_mask": _load_png(trial_dir / "target_mask.png") > 0.5,
        "distractor_mask": _load_png(trial_dir / "distractor_mask.png") > 0.5,
        "meta": json.loads((trial_dir / "meta.json").read_text()),
    }
