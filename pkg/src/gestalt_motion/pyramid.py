"""Spatial Gaussian pyramid: repeated blur + decimate by two."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

__all__ = ["BINOMIAL5", "gaussian_pyramid", "blur_decimate"]

# 5-tap binomial approximation to a Gaussian, unit sum
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_spatial(video: np.ndarray) -> np.ndarray:
    out = convolve1d(video, BINOMIAL5, axis=-2, mode="mirror")
    return convolve1d(out, BINOMIAL5, axis=-1, mode="mirror")


def blur_decimate(video: np.ndarray) -> np.ndarray:
    """One pyramid step: binomial blur, then keep every second row/column."""
    return _blur_spatial(video)[..., ::2, ::2]


def gaussian_pyramid(video: np.ndarray, levels: int) -> list[np.ndarray]:
    """Levels of decreasing resolution; level 0 is the input itself.

    Level k has spatial size ceil(H / 2^k) x ceil(W / 2^k).  Works on
    (..., H, W) arrays; leading axes (e.g. time) are untouched.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = video.shape[-2:]
    if min(h, w) < 2 ** (levels - 1):
        raise ValueError(
            f"spatial size {h}x{w} too small for {levels} pyramid levels"
        )
    out = [np.asarray(video)]
    for _ in range(levels - 1):
        out.append(blur_decimate(out[-1]))
    return out
