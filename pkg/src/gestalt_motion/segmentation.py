"""Coarse-to-fine recurrent segmentation head and its training loop.

The head is deliberately small: a 1x1 input projection, two 3x3
refinement convolutions, and a 1x1 output projection, with CELU and
instance normalization after every layer except the output projection.
The same parameters run at every scale; at each scale the current
scale's projected features are concatenated with the bilinearly
upsampled refined representation from the previous (coarser) scale, so
the network acts as a recurrent integrator from coarse to fine.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import load_masks, load_video, read_manifest
from .filterbank import build_filter_bank
from .motion_energy import AblationConfig, MotionEnergyModel
from .sources import HALF_WINDOW, MOTION_SOURCES, make_source, valid_target_frames

__all__ = [
    "SegNet",
    "TrainConfig",
    "TrainState",
    "seg_forward",
    "bce_loss",
    "seg_backward",
    "adam_step",
    "predict_mask",
    "train",
    "motion_energy_finetune_modes",
    "save_checkpoint",
    "load_checkpoint",
]

INSTANCE_NORM_EPS = 1e-5
CELU_ALPHA = 1.0


def _instance_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    xhat = (x - mean) / torch.sqrt(var + INSTANCE_NORM_EPS)
    return xhat * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)


def _conv3x3_reflect(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), weight, bias)


class SegNet(nn.Module):
    """Scale-shared segmentation head predicting per-pixel foreground logits."""

    def __init__(
        self,
        in_channels: int,
        features: int = 32,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.features = features
        gen = torch.Generator().manual_seed(seed)

        def conv_weight(shape):
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            w = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            return nn.Parameter(w.to(dtype))

        f = features
        self.in_proj_w = conv_weight((f, in_channels, 1, 1))
        self.in_proj_b = nn.Parameter(torch.zeros(f, dtype=dtype))
        self.refine1_w = conv_weight((f, 2 * f, 3, 3))
        self.refine1_b = nn.Parameter(torch.zeros(f, dtype=dtype))
        self.refine2_w = conv_weight((f, f, 3, 3))
        self.refine2_b = nn.Parameter(torch.zeros(f, dtype=dtype))
        self.out_proj_w = conv_weight((1, f, 1, 1))
        self.out_proj_b = nn.Parameter(torch.zeros(1, dtype=dtype))
        for name in ("norm_proj", "norm_ref1", "norm_ref2"):
            self.register_parameter(f"{name}_gamma", nn.Parameter(torch.ones(f, dtype=dtype)))
            self.register_parameter(f"{name}_beta", nn.Parameter(torch.zeros(f, dtype=dtype)))

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        """features: per-scale (B, C, H_s, W_s) tensors, finest first.

        Scales are processed coarse to fine; the recurrent input at the
        coarsest scale is a zero tensor.  Returns (B, H, W) logits at the
        finest resolution.
        """
        if not features:
            raise ValueError("no feature scales given")
        if features[0].shape[1] != self.in_channels:
            raise ValueError(
                f"feature channels {features[0].shape[1]} != "
                f"configured input channels {self.in_channels}"
            )
        hidden = None
        for x in reversed(features):
            p = _instance_norm(
                F.celu(F.conv2d(x, self.in_proj_w, self.in_proj_b), alpha=CELU_ALPHA),
                self.norm_proj_gamma,
                self.norm_proj_beta,
            )
            if hidden is None:
                hidden = torch.zeros_like(p)
            elif hidden.shape[-2:] != p.shape[-2:]:
                hidden = F.interpolate(
                    hidden, size=p.shape[-2:], mode="bilinear", align_corners=False
                )
            z = torch.cat([p, hidden], dim=1)
            r = _instance_norm(
                F.celu(_conv3x3_reflect(z, self.refine1_w, self.refine1_b), alpha=CELU_ALPHA),
                self.norm_ref1_gamma,
                self.norm_ref1_beta,
            )
            hidden = _instance_norm(
                F.celu(_conv3x3_reflect(r, self.refine2_w, self.refine2_b), alpha=CELU_ALPHA),
                self.norm_ref2_gamma,
                self.norm_ref2_beta,
            )
        logits = F.conv2d(hidden, self.out_proj_w, self.out_proj_b)
        return logits[:, 0]


def _as_tensors(features: list[np.ndarray], dtype: torch.dtype) -> list[torch.Tensor]:
    out = []
    for f in features:
        t = torch.as_tensor(np.asarray(f)).to(dtype)
        if t.ndim == 3:
            t = t[None]
        out.append(t)
    return out


def seg_forward(features: list[np.ndarray], net: SegNet) -> np.ndarray:
    """Numpy wrapper: per-scale (C, H_s, W_s) features -> (H, W) logits."""
    dtype = net.in_proj_w.dtype
    with torch.no_grad():
        logits = net(_as_tensors(features, dtype))
    return logits[0].numpy()


def bce_loss(logits, mask):
    """Mean per-pixel binary cross entropy on logits (softplus-stabilized).

    Accepts torch tensors (returns a tensor, differentiable) or numpy
    arrays (returns a float).
    """
    if isinstance(logits, torch.Tensor):
        if logits.shape != mask.shape:
            raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(mask.shape)}")
        return (F.softplus(logits) - mask * logits).mean()
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != mask.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {mask.shape}")
    softplus = np.logaddexp(0.0, logits)
    return float((softplus - mask * logits).mean())


def seg_backward(
    features: list[np.ndarray], mask: np.ndarray, net: SegNet
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of bce_loss w.r.t. every parameter."""
    dtype = net.in_proj_w.dtype
    net.zero_grad(set_to_none=True)
    tensors = _as_tensors(features, dtype)
    target = torch.as_tensor(np.asarray(mask, dtype=np.float64)).to(dtype)
    if target.ndim == 2:
        target = target[None]
    loss = bce_loss(net(tensors), target)
    loss.backward()
    return {
        name: (p.grad.detach().clone().numpy() if p.grad is not None else np.zeros(p.shape))
        for name, p in net.named_parameters()
    }


@dataclass
class TrainState:
    """Parameters plus Adam moments; moments are shaped exactly like params."""

    net: nn.Module
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    rng_seed: int = 0
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name, p in self.net.named_parameters():
            self.m.setdefault(name, torch.zeros_like(p))
            self.v.setdefault(name, torch.zeros_like(p))


def adam_step(
    state: TrainState,
    grads: dict[str, torch.Tensor],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> TrainState:
    """Standard bias-corrected Adam update; increments the step counter."""
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in state.net.named_parameters():
            if name not in grads:
                continue
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            state.m[name].mul_(beta1).add_(g, alpha=1 - beta1)
            state.v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = state.m[name] / (1 - beta1**t)
            v_hat = state.v[name] / (1 - beta2**t)
            p.sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))
    return state


def predict_mask(logits) -> np.ndarray:
    """Threshold at probability 0.5: mask = sigmoid(logit) > 0.5 = (logit > 0).

    A logit of exactly 0 (probability exactly 0.5) is excluded.
    """
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().numpy()
    return np.asarray(logits) > 0.0


@dataclass
class TrainConfig:
    steps: int = 40000
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    features: int = 32
    levels: int = 5
    checkpoint_interval: int = 2000
    out_dir: Path | None = None
    cache_features: bool = True  # frozen estimator only; ~20 MB per video

    def to_jsonable(self) -> dict:
        d = asdict(self)
        d["out_dir"] = str(self.out_dir) if self.out_dir else None
        return d


class _SampleBank:
    """Training videos in memory plus the uniform (video, frame) sampler.

    Only manifest entries from the train split are admitted; sampling a
    test video is structurally impossible.
    """

    def __init__(self, manifest: Path, test_dirs_forbidden: bool = True):
        splits = read_manifest(manifest)
        if not splits.get("train"):
            raise ValueError(f"manifest {manifest} has no train videos")
        self.video_dirs = list(splits["train"])
        if test_dirs_forbidden:
            forbidden = set(map(str, splits.get("test", [])))
            overlap = forbidden & set(map(str, self.video_dirs))
            assert not overlap, f"train/test overlap in manifest: {overlap}"
        self.frames = [load_video(d) for d in self.video_dirs]
        self.masks = [load_masks(d) for d in self.video_dirs]
        self.samples = [
            (vi, t)
            for vi, f in enumerate(self.frames)
            for t in valid_target_frames(len(f))
        ]
        self.feature_cache: list[list[np.ndarray]] | None = None

    def precompute(self, source):
        """Frozen-estimator fast path: features for every frame, once."""
        self.feature_cache = [
            [scale.astype(np.float32) for scale in
             source.features_video(frames, vdir)]
            for frames, vdir in zip(self.frames, self.video_dirs)
        ]

    def draw(self, rng: np.random.Generator, batch: int) -> list[tuple[int, int]]:
        idx = rng.integers(0, len(self.samples), size=batch)
        return [self.samples[i] for i in idx]


def _batch_features(source, bank: _SampleBank, picks: list[tuple[int, int]], dtype):
    """Per-scale stacked feature tensors and the matching mask tensor.

    Picks are grouped per video (one source call each) and reassembled
    in the original order.  Keeps the autograd graph when the source
    yields tensors (trainable estimators).
    """
    if bank.feature_cache is not None:
        n_scales = len(bank.feature_cache[0])
        tensors = [
            torch.as_tensor(
                np.stack([bank.feature_cache[vi][k][t - HALF_WINDOW] for vi, t in picks])
            ).to(dtype)
            for k in range(n_scales)
        ]
        masks = [bank.masks[vi][t] for vi, t in picks]
        target = torch.as_tensor(np.stack(masks).astype(np.float32)).to(dtype)
        return tensors, target
    by_video: dict[int, list[int]] = {}
    pick_loc: list[tuple[int, int]] = []  # (video, index within that video's call)
    for vi, t in picks:
        ts = by_video.setdefault(vi, [])
        pick_loc.append((vi, len(ts)))
        ts.append(t)
    feats_by_video = {
        vi: source.features_frames(bank.frames[vi], ts, bank.video_dirs[vi])
        for vi, ts in by_video.items()
    }
    n_scales = len(next(iter(feats_by_video.values())))
    ordered = [
        [feats_by_video[vi][k][j] for (vi, j) in pick_loc] for k in range(n_scales)
    ]
    if isinstance(ordered[0][0], torch.Tensor):
        tensors = [torch.stack(s).to(dtype) for s in ordered]
    else:
        tensors = [torch.as_tensor(np.stack(s)).to(dtype) for s in ordered]
    masks = [bank.masks[vi][t] for vi, t in picks]
    target = torch.as_tensor(np.stack(masks).astype(np.float32)).to(dtype)
    return tensors, target


def train(
    manifest: str | Path,
    motion_source: str = "motion_energy",
    config: TrainConfig | None = None,
    source=None,
    extra_params: list[nn.Parameter] | None = None,
    net: SegNet | None = None,
) -> SegNet:
    """Train the segmentation head on the manifest's train split.

    The motion estimator stays frozen (unless ``extra_params`` passes
    trainable estimator parameters in, as the finetuning ablations do).
    Deterministic given the seed.  Writes checkpoints, a loss history,
    and a config echo to ``config.out_dir`` when set.
    """
    config = config or TrainConfig()
    if motion_source not in MOTION_SOURCES:
        raise ValueError(f"unknown motion source {motion_source!r}")
    if source is None:
        source = make_source(motion_source, levels=config.levels)
    bank = _SampleBank(Path(manifest))
    if config.cache_features and config.steps > 0 and extra_params is None:
        bank.precompute(source)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = SegNet(source.num_channels, features=config.features, seed=config.seed)
    dtype = net.in_proj_w.dtype

    params = dict(net.named_parameters())
    if extra_params:
        for i, p in enumerate(extra_params):
            params[f"estimator.{i}"] = p
    state = TrainState(net=_ParamView(params), rng_seed=config.seed)

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(config.steps):
        picks = bank.draw(rng, config.batch_size)
        tensors, target = _batch_features(source, bank, picks, dtype)
        for p in params.values():
            p.grad = None
        logits = net(tensors)
        loss = bce_loss(logits, target)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at step {step}: {loss.item()!r} (picks={picks})"
            )
        loss.backward()
        grads = {
            name: (p.grad if p.grad is not None else torch.zeros_like(p))
            for name, p in params.items()
        }
        adam_step(state, grads, lr=config.learning_rate)
        state.loss_history.append(float(loss.detach()))
        if out_dir and config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
            save_checkpoint(out_dir / f"checkpoint_{step + 1:06d}.seg", net,
                            motion_source=motion_source, levels=config.levels)

    if out_dir:
        save_checkpoint(out_dir / "checkpoint_final.seg", net,
                        motion_source=motion_source, levels=config.levels)
        run_manifest = {
            "seed": config.seed,
            "motion_source": motion_source,
            "config": config.to_jsonable(),
            "loss_history": state.loss_history,
        }
        (out_dir / "run.json").write_text(json.dumps(run_manifest, indent=2))
    net.loss_history = state.loss_history
    return net


class _ParamView(nn.Module):
    """Expose an explicit name->parameter mapping to TrainState/adam_step."""

    def __init__(self, params: dict[str, nn.Parameter]):
        super().__init__()
        self._params = params

    def named_parameters(self, *args, **kwargs):
        return list(self._params.items())


def motion_energy_finetune_modes(
    ablation: AblationConfig,
    manifest: str | Path,
    config: TrainConfig | None = None,
    filter_bank=None,
) -> tuple[SegNet, MotionEnergyModel]:
    """End-to-end training with per-layer-group modes on the energy model.

    Groups set to ``fix`` receive no gradient; ``finetune`` starts from
    the reference weights; ``scratch`` from a seeded random init.  With
    every group fixed this is exactly the standard training path.
    """
    config = config or TrainConfig()
    fb = filter_bank or build_filter_bank()
    if ablation.all_fixed:
        source = make_source("motion_energy", levels=config.levels, bank=fb, ablation=ablation)
        net = train(manifest, "motion_energy", config, source=source)
        return net, source.model

    me_model = MotionEnergyModel(
        fb, ablation, levels=config.levels, dtype=torch.float32, init_seed=config.seed
    )

    class _TrainableEnergySource:
        num_channels = me_model.num_output_channels
        levels = config.levels

        def features_frames(self, frames, targets, video_dir=None):
            windows = np.stack(
                [frames[t - HALF_WINDOW : t + HALF_WINDOW + 1] for t in targets]
            )
            scales = me_model(torch.as_tensor(windows).to(torch.float32))
            return [s[:, :, 0] for s in scales]  # keep graph: tensors, not numpy

    net = train(
        manifest,
        "motion_energy",
        config,
        source=_TrainableEnergySource(),
        extra_params=[p for p in me_model.parameters()],
    )
    return net, me_model


CHECKPOINT_MAGIC = b"SEG1"


def save_checkpoint(path: str | Path, net: SegNet, motion_source: str = "", levels: int = 5):
    """SEG1 binary: config echo, then named tensors as f32 little-endian."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", net.features, levels))
        src = motion_source.encode()
        f.write(struct.pack("<I", len(src)))
        f.write(src)
        tensors = list(net.named_parameters())
        f.write(struct.pack("<I", len(tensors)))
        for name, p in tensors:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            dims = tuple(p.shape)
            f.write(struct.pack("<I", len(dims)))
            f.write(struct.pack(f"<{len(dims)}I", *dims))
            f.write(np.ascontiguousarray(p.detach().numpy(), dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[SegNet, dict]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a segmentation checkpoint")
        features, levels = struct.unpack("<II", f.read(8))
        (src_len,) = struct.unpack("<I", f.read(4))
        motion_source = f.read(src_len).decode()
        (n_tensors,) = struct.unpack("<I", f.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
            tensors[name] = data.copy()
    in_channels = tensors["in_proj_w"].shape[1]
    net = SegNet(in_channels, features=features)
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(torch.as_tensor(tensors[name]))
    meta = {"features": features, "levels": levels, "motion_source": motion_source}
    return net, meta
