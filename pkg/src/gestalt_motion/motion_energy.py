"""Two-stage motion energy pipeline (V1 -> MT) as a convolutional model.

The cascade per scale:

    V1: oriented 3D convolution -> squaring -> divisive channel
        normalization -> spatial Gaussian pooling
    MT: 1x1 velocity combination -> half-squaring -> divisive channel
        normalization -> spatial Gaussian pooling

run over a spatial pyramid of the input volume.  Temporal convolution
uses valid semantics (a T-frame input yields T - 8 output frames for the
default 9-tap temporal kernels); spatial convolutions use mirror
boundary handling.  Activations are never rescaled between layers; the
semisaturation constants absorb overall scale.

Every structural switch studied in the ablation experiments lives in
:class:`AblationConfig`, including per-layer-group training modes used
by the end-to-end finetuning variants.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .filterbank import FilterBank, basis_exponents
from .pyramid import BINOMIAL5

__all__ = [
    "VideoVolume",
    "AblationConfig",
    "MotionEnergyMaps",
    "MotionEnergyModel",
    "channel_norm",
    "v1_stage",
    "mt_stage",
    "motion_energy",
    "write_energy_maps",
    "read_energy_maps",
]

INSTANCE_NORM_EPS = 1e-5
LAYER_GROUPS = ("v1_linear", "v1_blur", "mt_linear", "mt_blur")
TRAIN_MODES = ("fix", "finetune", "scratch")


@dataclass
class VideoVolume:
    """Grayscale T x H x W luminance volume with values in [0, 1]."""

    frames: np.ndarray
    frame_rate: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError(f"expected (T, H, W) frames, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class AblationConfig:
    """Structural switches for the motion energy cascade.

    ``*_mode`` fields choose per layer group between using the reference
    weights (fix), initializing from them and training (finetune), or a
    seeded random initialization (scratch).  When ``include_mt_stage``
    is False, the MT sub-switches are ignored.
    """

    v1_nonlinearity: str = "square"  # square | relu
    mt_nonlinearity: str = "rectified_square"  # rectified_square | relu
    norm_kind: str = "channel"  # channel | instance | none
    include_v1_blur: bool = True
    include_mt_blur: bool = True
    include_mt_linear: bool = True
    include_mt_stage: bool = True
    v1_linear_mode: str = "fix"
    v1_blur_mode: str = "fix"
    mt_linear_mode: str = "fix"
    mt_blur_mode: str = "fix"

    def __post_init__(self):
        if self.v1_nonlinearity not in ("square", "relu"):
            raise ValueError(f"bad v1_nonlinearity {self.v1_nonlinearity!r}")
        if self.mt_nonlinearity not in ("rectified_square", "relu"):
            raise ValueError(f"bad mt_nonlinearity {self.mt_nonlinearity!r}")
        if self.norm_kind not in ("channel", "instance", "none"):
            raise ValueError(f"bad norm_kind {self.norm_kind!r}")
        for group in LAYER_GROUPS:
            mode = getattr(self, f"{group}_mode")
            if mode not in TRAIN_MODES:
                raise ValueError(f"bad {group}_mode {mode!r}")

    @property
    def all_fixed(self) -> bool:
        return all(getattr(self, f"{g}_mode") == "fix" for g in LAYER_GROUPS)

    def trainable_groups(self) -> list[str]:
        groups = [g for g in LAYER_GROUPS if getattr(self, f"{g}_mode") != "fix"]
        if not self.include_mt_stage:
            groups = [g for g in groups if not g.startswith("mt_")]
        return groups


@dataclass
class MotionEnergyMaps:
    """Per-scale population responses, each of shape (C, T', H_s, W_s)."""

    scales: list[np.ndarray]

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def num_channels(self) -> int:
        return self.scales[0].shape[0]

    @property
    def num_frames(self) -> int:
        return self.scales[0].shape[1]

    def frame(self, index: int) -> list[np.ndarray]:
        """Single-frame view: one (C, H_s, W_s) array per scale."""
        return [s[:, index] for s in self.scales]


def channel_norm(maps: np.ndarray, sigma_sq: float, axis: int = 0) -> np.ndarray:
    """Divisive normalization: x_i / (sum_j x_j + sigma_sq) along ``axis``.

    Inputs must be nonnegative (post-squaring energies) and sigma_sq > 0,
    which bounds every output in [0, 1) and per-position sums below 1.
    """
    maps = np.asarray(maps)
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    if maps.size and maps.min() < 0:
        raise ValueError("channel_norm expects nonnegative inputs")
    return maps / (maps.sum(axis=axis, keepdims=True) + sigma_sq)


def _mirror_indices(n: int, pad: int, device) -> torch.Tensor:
    """Index map implementing whole-sample mirror extension of length n+2*pad.

    Handles pads larger than the axis (repeated reflection), which the
    built-in padding modes do not.
    """
    idx = np.arange(-pad, n + pad)
    if n == 1:
        mapped = np.zeros_like(idx)
    else:
        m = n - 1
        q = np.mod(idx, 2 * m)
        mapped = m - np.abs(q - m)
    return torch.as_tensor(mapped, dtype=torch.long, device=device)


def _conv_along(x: torch.Tensor, taps: torch.Tensor, dim: int, valid: bool = False) -> torch.Tensor:
    """Depthwise 1D convolution of a (B, C, T, H, W) tensor along one axis.

    Uses convolution (not correlation) semantics; mirror boundary unless
    ``valid``.
    """
    k = taps.numel()
    r = (k - 1) // 2
    if not valid and r > 0:
        x = x.index_select(dim, _mirror_indices(x.shape[dim], r, x.device))
    c = x.shape[1]
    shape = [1, 1, 1]
    shape[dim - 2] = k
    w = taps.flip(0).reshape(1, 1, *shape).expand(c, 1, *shape)
    return F.conv3d(x, w, groups=c)


class MotionEnergyModel(nn.Module):
    """Torch implementation of the multi-scale motion energy cascade.

    Input: (B, T, H, W) luminance volumes.  Output: one tensor per scale
    of shape (B, C, T - kt + 1, H_s, W_s).  With the default ablation
    config all weights are fixed buffers and the V1 stage runs through a
    fast separable path; any trainable layer group switches the V1
    convolution to materialized 3D kernels.
    """

    def __init__(
        self,
        bank: FilterBank,
        ablation: AblationConfig | None = None,
        levels: int = 5,
        dtype: torch.dtype = torch.float32,
        init_seed: int = 0,
    ):
        super().__init__()
        self.bank = bank
        self.ablation = ablation or AblationConfig()
        self.levels = levels
        self._dtype = dtype

        def tensor(a):
            return torch.as_tensor(np.asarray(a), dtype=dtype)

        self.register_buffer("spatial_taps", tensor(bank.spatial_taps))
        self.register_buffer("temporal_taps", tensor(bank.temporal_taps))
        self.register_buffer("dir_weights", tensor(bank.v1_direction_weights))
        self.register_buffer("pyr_taps", tensor(BINOMIAL5))

        gen = torch.Generator().manual_seed(init_seed)
        trainable = set(self.ablation.trainable_groups())

        def register(name: str, value: torch.Tensor):
            if name in trainable:
                mode = getattr(self.ablation, f"{name}_mode")
                if mode == "scratch":
                    fan_in = value.numel() // value.shape[0] if value.ndim > 1 else value.numel()
                    bound = 1.0 / np.sqrt(fan_in)
                    value = (torch.rand(value.shape, generator=gen, dtype=dtype) * 2 - 1) * bound
                self.register_parameter(name, nn.Parameter(value.clone()))
            else:
                self.register_buffer(name, value)

        # V1 linear: separable fast path when fixed, materialized 3D kernels
        # (n_v1, 1, kt, ks, ks) when trainable.
        self._v1_materialized = "v1_linear" in trainable
        if self._v1_materialized:
            basis = np.stack([bank.basis_kernel(a, b, c) for (a, b, c) in basis_exponents()])
            kernels = np.tensordot(bank.v1_direction_weights, basis, axes=(1, 0))
            register("v1_linear", tensor(kernels[:, None]))
        register("v1_blur", tensor(bank.v1_blur))
        register("mt_linear", tensor(bank.mt_weights))
        register("mt_blur", tensor(bank.mt_blur))

    @property
    def num_output_channels(self) -> int:
        if not self.ablation.include_mt_stage:
            return self.bank.n_v1
        if not self.ablation.include_mt_linear:
            return self.bank.n_v1
        return self.bank.n_mt

    def _normalize(self, x: torch.Tensor, sigma_sq: float) -> torch.Tensor:
        kind = self.ablation.norm_kind
        if kind == "channel":
            return x / (x.sum(dim=1, keepdim=True) + sigma_sq)
        if kind == "instance":
            mean = x.mean(dim=(-2, -1), keepdim=True)
            var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
            return (x - mean) / torch.sqrt(var + INSTANCE_NORM_EPS)
        return x

    def _v1_linear_separable(self, x: torch.Tensor) -> torch.Tensor:
        by_t = [_conv_along(x, self.temporal_taps[c], dim=2, valid=True) for c in range(4)]
        responses = []
        cache: dict[tuple[int, int], torch.Tensor] = {}
        for (a, b, c) in basis_exponents():
            if (b, c) not in cache:
                cache[(b, c)] = _conv_along(by_t[c], self.spatial_taps[b], dim=3)
            responses.append(_conv_along(cache[(b, c)], self.spatial_taps[a], dim=4))
        basis = torch.cat(responses, dim=1)  # (B, 10, T', H, W)
        return torch.einsum("dc,bcthw->bdthw", self.dir_weights, basis)

    def _v1_linear_full(self, x: torch.Tensor) -> torch.Tensor:
        ks = self.spatial_taps.shape[1]
        r = (ks - 1) // 2
        for dim in (3, 4):
            x = x.index_select(dim, _mirror_indices(x.shape[dim], r, x.device))
        return F.conv3d(x, self.v1_linear.flip(-1).flip(-2).flip(-3))

    def _spatial_blur(self, x: torch.Tensor, taps: torch.Tensor) -> torch.Tensor:
        return _conv_along(_conv_along(x, taps, dim=3), taps, dim=4)

    def v1_stage(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, T, H, W) -> (B, n_v1, T', H, W) population maps."""
        if x.shape[2] < self.bank.temporal_extent:
            raise ValueError(
                f"volume has {x.shape[2]} frames; V1 temporal kernel needs "
                f">= {self.bank.temporal_extent}"
            )
        lin = self._v1_linear_full(x) if self._v1_materialized else self._v1_linear_separable(x)
        act = lin**2 if self.ablation.v1_nonlinearity == "square" else F.relu(lin)
        out = self._normalize(act, self.bank.sigma_sq_v1)
        if self.ablation.include_v1_blur:
            out = self._spatial_blur(out, self.v1_blur)
        return out

    def mt_stage(self, v1_maps: torch.Tensor) -> torch.Tensor:
        """(B, n_v1, T', H, W) -> velocity-tuned maps; identity if MT removed."""
        if not self.ablation.include_mt_stage:
            return v1_maps
        x = v1_maps
        if self.ablation.include_mt_linear:
            if x.shape[1] != self.mt_linear.shape[1]:
                raise ValueError(
                    f"v1 maps have {x.shape[1]} channels, mt weights expect "
                    f"{self.mt_linear.shape[1]}"
                )
            x = torch.einsum("mc,bcthw->bmthw", self.mt_linear, x)
        if self.ablation.mt_nonlinearity == "rectified_square":
            x = F.relu(x) ** 2
        else:
            x = F.relu(x)
        x = self._normalize(x, self.bank.sigma_sq_mt)
        if self.ablation.include_mt_blur:
            x = self._spatial_blur(x, self.mt_blur)
        return x

    def pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = [x]
        for _ in range(self.levels - 1):
            blurred = self._spatial_blur(out[-1], self.pyr_taps)
            out.append(blurred[..., ::2, ::2])
        return out

    def forward(self, volume: torch.Tensor) -> list[torch.Tensor]:
        if volume.ndim == 3:
            volume = volume[None]
        x = volume[:, None].to(self._dtype)
        h, w = x.shape[-2:]
        if min(h, w) < 2 ** (self.levels - 1):
            raise ValueError(f"spatial size {h}x{w} too small for {self.levels} levels")
        return [self.mt_stage(self.v1_stage(level)) for level in self.pyramid(x)]


def _as_volume_array(video: VideoVolume | np.ndarray) -> np.ndarray:
    return video.frames if isinstance(video, VideoVolume) else np.asarray(video)


def v1_stage(
    video: VideoVolume | np.ndarray,
    bank: FilterBank,
    ablation: AblationConfig | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Oriented filtering + squaring + normalization + pooling at one scale."""
    model = MotionEnergyModel(bank, ablation, levels=1, dtype=_torch_dtype(dtype))
    with torch.no_grad():
        out = model.v1_stage(torch.as_tensor(_as_volume_array(video))[None, None].to(_torch_dtype(dtype)))
    return out[0].numpy()


def mt_stage(
    v1_maps: np.ndarray,
    bank: FilterBank,
    ablation: AblationConfig | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Velocity combination + half-squaring + normalization + pooling."""
    model = MotionEnergyModel(bank, ablation, levels=1, dtype=_torch_dtype(dtype))
    with torch.no_grad():
        out = model.mt_stage(torch.as_tensor(np.asarray(v1_maps))[None].to(_torch_dtype(dtype)))
    return out[0].numpy()


def motion_energy(
    video: VideoVolume | np.ndarray,
    bank: FilterBank,
    ablation: AblationConfig | None = None,
    levels: int = 5,
    dtype=np.float64,
) -> MotionEnergyMaps:
    """Full multi-scale cascade; pure and deterministic."""
    frames = _as_volume_array(video)
    model = MotionEnergyModel(bank, ablation, levels=levels, dtype=_torch_dtype(dtype))
    with torch.no_grad():
        out = model(torch.as_tensor(frames).to(_torch_dtype(dtype)))
    return MotionEnergyMaps([t[0].numpy() for t in out])


def _torch_dtype(dtype) -> torch.dtype:
    if isinstance(dtype, torch.dtype):
        return dtype
    return torch.float64 if np.dtype(dtype) == np.float64 else torch.float32


MEM_MAGIC = b"MEM1"


def write_energy_maps(path: str | Path, scales: list[np.ndarray]):
    """Serialize single-frame maps: magic, scale count, per-scale dims, f32 data."""
    with open(path, "wb") as f:
        f.write(MEM_MAGIC)
        f.write(struct.pack("<I", len(scales)))
        for s in scales:
            if s.ndim != 3:
                raise ValueError("each scale must be (C, H, W)")
            f.write(struct.pack("<III", *s.shape))
        for s in scales:
            f.write(np.ascontiguousarray(s, dtype="<f4").tobytes())


def read_energy_maps(path: str | Path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != MEM_MAGIC:
            raise ValueError(f"{path}: bad magic, not an energy-map file")
        (n_scales,) = struct.unpack("<I", f.read(4))
        dims = [struct.unpack("<III", f.read(12)) for _ in range(n_scales)]
        out = []
        for c, h, w in dims:
            data = np.frombuffer(f.read(4 * c * h * w), dtype="<f4")
            if data.size != c * h * w:
                raise ValueError(f"{path}: truncated payload")
            out.append(data.reshape(c, h, w).copy())
        return out
