"""Dense optical flow: file interchange, rescaling, and a classical estimator.

Flow fields store per-pixel displacements in pixels/frame with u along
columns and v along rows.  The Middlebury ``.flo`` format is used for
interchange with externally computed predictions (convention:
``<video>/flow/%05d.flo`` where file t holds the flow from frame t to
frame t+1).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d, map_coordinates

from .pyramid import BINOMIAL5, gaussian_pyramid

__all__ = [
    "FlowField",
    "FloFormatError",
    "read_flo",
    "write_flo",
    "rescale_flow",
    "multiscale_flow",
    "LucasKanadeConfig",
    "lucas_kanade",
    "multiframe_flows",
    "sample_flow",
    "warp_backward",
]

FLO_MAGIC = 202021.25


class FloFormatError(ValueError):
    """Raised for malformed .flo files."""


@dataclass
class FlowField:
    """u, v: (H, W) column/row displacements in pixels/frame."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be equal-shape 2D arrays")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def stacked(self) -> np.ndarray:
        """(2, H, W) array, channel 0 = u, channel 1 = v."""
        return np.stack([self.u, self.v])


def write_flo(field: FlowField, path: str | Path):
    h, w = field.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = field.u
    data[..., 1] = field.v
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def read_flo(path: str | Path) -> FlowField:
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4 or struct.unpack("<f", head)[0] != FLO_MAGIC:
            raise FloFormatError(f"{path}: bad magic number")
        dims = f.read(8)
        if len(dims) != 8:
            raise FloFormatError(f"{path}: truncated header")
        w, h = struct.unpack("<ii", dims)
        if w <= 0 or h <= 0:
            raise FloFormatError(f"{path}: nonpositive dimensions {w}x{h}")
        payload = f.read(8 * w * h)
        if len(payload) != 8 * w * h:
            raise FloFormatError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(data[..., 0].astype(np.float64), data[..., 1].astype(np.float64))


def _resize_bilinear(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel-aligned sample centers."""
    th, tw = target
    h, w = img.shape
    if (th, tw) == (h, w):
        return img.copy()
    yy, xx = np.mgrid[0:th, 0:tw].astype(np.float64)
    ys = np.clip((yy + 0.5) * h / th - 0.5, 0, h - 1)
    xs = np.clip((xx + 0.5) * w / tw - 0.5, 0, w - 1)
    return map_coordinates(img, [ys, xs], order=1, mode="nearest")


def rescale_flow(field: FlowField, target: tuple[int, int]) -> FlowField:
    """Resample to (H', W') and convert displacements to target pixel units.

    u scales by W'/W and v by H'/H so that the field keeps describing
    the same motion at the new resolution.
    """
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = field.shape
    u = _resize_bilinear(field.u, target) * (tw / w)
    v = _resize_bilinear(field.v, target) * (th / h)
    return FlowField(u, v)


def multiscale_flow(field: FlowField, levels: int) -> list[FlowField]:
    """Pyramid of rescaled flows; level k has size ceil(H/2^k) x ceil(W/2^k)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = field.shape
    out = []
    for k in range(levels):
        target = (-(-h // 2**k), -(-w // 2**k))
        out.append(rescale_flow(field, target))
    return out


def sample_flow(field: FlowField, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear flow lookup at subpixel positions (edge-clamped)."""
    u = map_coordinates(field.u, [y, x], order=1, mode="nearest")
    v = map_coordinates(field.v, [y, x], order=1, mode="nearest")
    return u, v


def warp_backward(image: np.ndarray, field: FlowField) -> np.ndarray:
    """Sample ``image`` at x + flow(x): warps frame t+1 back onto frame t."""
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return map_coordinates(image, [yy + field.v, xx + field.u], order=1, mode="nearest")


@dataclass(frozen=True)
class LucasKanadeConfig:
    window: int = 7
    pyramid_levels: int = 3
    iterations: int = 3
    eig_threshold: float = 1e-4  # min structure-tensor eigenvalue, per pixel, [0,1] input


def lucas_kanade(
    frame_a: np.ndarray, frame_b: np.ndarray, config: LucasKanadeConfig | None = None
) -> FlowField:
    """Coarse-to-fine iterative Lucas-Kanade flow from frame_a to frame_b.

    Windows whose structure tensor is ill-conditioned (smallest
    eigenvalue below the threshold) contribute zero flow.
    """
    config = config or LucasKanadeConfig()
    frame_a = np.asarray(frame_a, dtype=np.float64)
    frame_b = np.asarray(frame_b, dtype=np.float64)
    if frame_a.shape != frame_b.shape or frame_a.ndim != 2:
        raise ValueError("frames must be equal-shape 2D arrays")

    levels = config.pyramid_levels
    min_dim = min(frame_a.shape)
    while levels > 1 and min_dim < 2**(levels - 1) * config.window:
        levels -= 1
    pyr_a = gaussian_pyramid(frame_a, levels)
    pyr_b = gaussian_pyramid(frame_b, levels)

    win = np.ones(config.window, dtype=np.float64)

    def wsum(x):
        out = convolve1d(x, win, axis=0, mode="mirror")
        return convolve1d(out, win, axis=1, mode="mirror")

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(levels - 1, -1, -1):
        a, b = pyr_a[level], pyr_b[level]
        if u.shape != a.shape:
            up = rescale_flow(FlowField(u, v), a.shape)
            u, v = up.u, up.v
        h, w = a.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        gy, gx = np.gradient(a)
        sxx = wsum(gx * gx)
        syy = wsum(gy * gy)
        sxy = wsum(gx * gy)
        trace = sxx + syy
        det = sxx * syy - sxy * sxy
        lam_min = trace / 2.0 - np.sqrt(np.maximum(trace * trace / 4.0 - det, 0.0))
        good = lam_min / config.window**2 >= config.eig_threshold
        safe_det = np.where(np.abs(det) > 1e-12, det, 1.0)
        for _ in range(config.iterations):
            bw = map_coordinates(b, [yy + v, xx + u], order=1, mode="nearest")
            it = bw - a
            bx = wsum(gx * it)
            by = wsum(gy * it)
            du = -(syy * bx - sxy * by) / safe_det
            dv = -(sxx * by - sxy * bx) / safe_det
            limit = float(config.window)
            u = u + np.where(good, np.clip(du, -limit, limit), 0.0)
            v = v + np.where(good, np.clip(dv, -limit, limit), 0.0)
        if level == 0:
            u = np.where(good, u, 0.0)
            v = np.where(good, v, 0.0)
    return FlowField(u, v)


def multiframe_flows(window: np.ndarray, estimator=lucas_kanade) -> list[FlowField]:
    """Flows from the central frame of a 9-frame window to the 8 others.

    Returned in temporal order (offsets -4..-1, +1..+4 relative to the
    central frame).
    """
    window = np.asarray(window)
    if window.ndim != 3 or window.shape[0] != 9:
        raise ValueError(f"expected a 9-frame window, got shape {window.shape}")
    center = 4
    return [estimator(window[center], window[t]) for t in range(9) if t != center]
