"""Motion feature providers for the segmentation head.

A source turns video frames into per-scale feature maps for selected
target frames.  Frame t is always described by the 9-frame window
centered on it, so valid targets are t in [4, T-5].  Three sources
mirror the studied motion estimators:

- ``motion_energy``: the frozen two-stage energy model;
- ``flow_multiscale``: a two-frame flow estimate (frame t to t+1),
  rescaled to the energy model's pyramid resolutions;
- ``flow_multiframe``: flows from the central frame to the 8 other
  window frames, stacked.

Flow can come from the built-in Lucas-Kanade estimator or from
externally supplied ``<video>/flow/%05d.flo`` predictions.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .filterbank import FilterBank, build_filter_bank
from .flow import FlowField, LucasKanadeConfig, lucas_kanade, multiscale_flow, read_flo
from .motion_energy import AblationConfig, MotionEnergyModel

__all__ = [
    "MOTION_SOURCES",
    "MotionEnergySource",
    "FlowMultiscaleSource",
    "FlowMultiframeSource",
    "make_source",
    "valid_target_frames",
]

WINDOW = 9
HALF_WINDOW = WINDOW // 2

MOTION_SOURCES = ("motion_energy", "flow_multiscale", "flow_multiframe")


def valid_target_frames(num_frames: int) -> range:
    """Frames whose 9-frame window lies fully inside the video."""
    if num_frames < WINDOW:
        raise ValueError(f"video too short: {num_frames} < {WINDOW} frames")
    return range(HALF_WINDOW, num_frames - HALF_WINDOW)


class MotionEnergySource:
    """Frozen motion energy features, computed per 9-frame window."""

    name = "motion_energy"

    def __init__(
        self,
        bank: FilterBank | None = None,
        ablation: AblationConfig | None = None,
        levels: int = 5,
        dtype: torch.dtype = torch.float32,
    ):
        self.bank = bank or build_filter_bank()
        self.levels = levels
        self.model = MotionEnergyModel(self.bank, ablation, levels=levels, dtype=dtype)
        self.model.eval()
        self._dtype = dtype

    @property
    def num_channels(self) -> int:
        return self.model.num_output_channels

    def features_frames(
        self, frames: np.ndarray, targets: list[int], video_dir: Path | None = None
    ) -> list[np.ndarray]:
        valid = valid_target_frames(len(frames))
        windows = []
        for t in targets:
            if t not in valid:
                raise ValueError(f"target frame {t} outside valid range {valid}")
            windows.append(frames[t - HALF_WINDOW : t + HALF_WINDOW + 1])
        batch = torch.as_tensor(np.stack(windows)).to(self._dtype)
        with torch.no_grad():
            scales = self.model(batch)
        # (B, C, 1, h, w) per scale -> (B, C, h, w)
        return [s[:, :, 0].numpy() for s in scales]

    def features_video(self, frames: np.ndarray, video_dir: Path | None = None) -> list[np.ndarray]:
        """All valid frames at once via full-length valid temporal convolution."""
        batch = torch.as_tensor(np.asarray(frames))[None].to(self._dtype)
        with torch.no_grad():
            scales = self.model(batch)
        # (1, C, T', h, w) -> (T', C, h, w)
        return [s[0].movedim(1, 0).numpy() for s in scales]


class _FlowSourceBase:
    def __init__(
        self,
        levels: int = 5,
        lk_config: LucasKanadeConfig | None = None,
        flow_root: Path | None = None,
    ):
        self.levels = levels
        self.lk_config = lk_config or LucasKanadeConfig()
        self.flow_root = Path(flow_root) if flow_root is not None else None

    def _flow(self, frames: np.ndarray, t_from: int, t_to: int, video_dir: Path | None) -> FlowField:
        if self.flow_root is not None:
            if video_dir is None:
                raise ValueError("file-based flow needs the video directory name")
            if t_to != t_from + 1:
                raise ValueError("file-based flow only provides consecutive-frame fields")
            path = self.flow_root / Path(video_dir).name / "flow" / f"{t_from:05d}.flo"
            return read_flo(path)
        return lucas_kanade(frames[t_from], frames[t_to], self.lk_config)

    def features_video(self, frames: np.ndarray, video_dir: Path | None = None) -> list[np.ndarray]:
        targets = list(valid_target_frames(len(frames)))
        per_frame = self.features_frames(frames, targets, video_dir)
        return per_frame


class FlowMultiscaleSource(_FlowSourceBase):
    """Two-frame flow (t -> t+1) rescaled to the feature pyramid."""

    name = "flow_multiscale"
    num_channels = 2

    def features_frames(
        self, frames: np.ndarray, targets: list[int], video_dir: Path | None = None
    ) -> list[np.ndarray]:
        valid = valid_target_frames(len(frames))
        per_scale: list[list[np.ndarray]] = [[] for _ in range(self.levels)]
        for t in targets:
            if t not in valid:
                raise ValueError(f"target frame {t} outside valid range {valid}")
            pyr = multiscale_flow(self._flow(frames, t, t + 1, video_dir), self.levels)
            for k, f in enumerate(pyr):
                per_scale[k].append(f.stacked().astype(np.float32))
        return [np.stack(s) for s in per_scale]


class FlowMultiframeSource(_FlowSourceBase):
    """Flows from the central frame to the 8 other window frames, stacked."""

    name = "flow_multiframe"
    num_channels = 2 * (WINDOW - 1)

    def features_frames(
        self, frames: np.ndarray, targets: list[int], video_dir: Path | None = None
    ) -> list[np.ndarray]:
        if self.flow_root is not None:
            raise ValueError("multiframe flow requires the built-in estimator")
        valid = valid_target_frames(len(frames))
        per_scale: list[list[np.ndarray]] = [[] for _ in range(self.levels)]
        for t in targets:
            if t not in valid:
                raise ValueError(f"target frame {t} outside valid range {valid}")
            offsets = [o for o in range(-HALF_WINDOW, HALF_WINDOW + 1) if o != 0]
            pyramids = [
                multiscale_flow(self._flow(frames, t, t + o, video_dir), self.levels)
                for o in offsets
            ]
            for k in range(self.levels):
                maps = np.concatenate([p[k].stacked() for p in pyramids])
                per_scale[k].append(maps.astype(np.float32))
        return [np.stack(s) for s in per_scale]


def make_source(
    name: str,
    levels: int = 5,
    bank: FilterBank | None = None,
    ablation: AblationConfig | None = None,
    flow_root: Path | None = None,
    lk_config: LucasKanadeConfig | None = None,
):
    if name == "motion_energy":
        return MotionEnergySource(bank, ablation, levels=levels)
    if name == "flow_multiscale":
        return FlowMultiscaleSource(levels=levels, lk_config=lk_config, flow_root=flow_root)
    if name == "flow_multiframe":
        return FlowMultiframeSource(levels=levels, lk_config=lk_config, flow_root=flow_root)
    raise ValueError(f"unknown motion source {name!r}; expected one of {MOTION_SOURCES}")
