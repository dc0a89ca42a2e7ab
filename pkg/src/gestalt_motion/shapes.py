"""Procedural star-convex shapes and value-noise textures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

__all__ = ["ShapeSpec", "sample_shape", "rasterize_shape", "value_noise_texture"]


@dataclass(frozen=True)
class ShapeSpec:
    """Star-convex polygon: vertex radii at evenly spaced angles.

    The boundary connects vertices (angle_i, radius_i) with straight
    segments; membership tests are exact (polar line equation), so the
    same spec rasterizes identically at any position.
    """

    radii: tuple[float, ...]
    rotation: float = 0.0
    texture_seed: int = 0

    @property
    def max_radius(self) -> float:
        return max(self.radii)


def sample_shape(
    rng: np.random.Generator,
    mean_radius: float = 10.0,
    irregularity: float = 0.45,
    vertex_range: tuple[int, int] = (8, 16),
    smoothing: int = 1,
) -> ShapeSpec:
    """Random star-convex polygon with smoothed vertex radii."""
    n = int(rng.integers(vertex_range[0], vertex_range[1] + 1))
    radii = mean_radius * (1.0 + irregularity * (2.0 * rng.random(n) - 1.0))
    for _ in range(smoothing):
        radii = (np.roll(radii, 1) + radii + np.roll(radii, -1)) / 3.0
    return ShapeSpec(
        radii=tuple(float(r) for r in radii),
        rotation=float(rng.uniform(0.0, 2.0 * np.pi)),
        texture_seed=int(rng.integers(0, 2**31)),
    )


def _boundary_radius(spec: ShapeSpec, theta: np.ndarray) -> np.ndarray:
    """Distance from the centroid to the polygon boundary along angle theta."""
    radii = np.asarray(spec.radii)
    n = len(radii)
    step = 2.0 * np.pi / n
    rel = np.mod(theta - spec.rotation, 2.0 * np.pi)
    i = np.minimum((rel / step).astype(int), n - 1)
    r0 = radii[i]
    r1 = radii[(i + 1) % n]
    # polar form of the line through (r0, i*step) and (r1, (i+1)*step)
    a = rel - i * step
    denom = r1 * np.sin(a) + r0 * np.sin(step - a)
    return r0 * r1 * np.sin(step) / np.maximum(denom, 1e-12)


def rasterize_shape(
    spec: ShapeSpec, size: tuple[int, int], center: tuple[float, float]
) -> np.ndarray:
    """Binary mask of the shape at a subpixel center on an (H, W) grid.

    A pixel belongs to the shape when its center lies inside the
    polygon.  ``center`` is (x, y) in pixel coordinates.
    """
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx - center[0]
    dy = yy - center[1]
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    return rho <= _boundary_radius(spec, theta)


def value_noise_texture(
    seed: int, size: tuple[int, int], octaves: tuple[int, ...] = (8, 16)
) -> np.ndarray:
    """Periodic two-octave value noise in [0.1, 0.9].

    Periodicity makes translated sampling with wraparound seamless, so a
    texture can drift indefinitely without running out of content.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    amp = 1.0
    for cells in octaves:
        lattice = rng.random((cells, cells))
        tex += amp * map_coordinates(
            lattice, [yy * cells / h, xx * cells / w], order=1, mode="grid-wrap"
        )
        amp *= 0.5
    lo, hi = tex.min(), tex.max()
    tex = (tex - lo) / (hi - lo + 1e-12)
    return 0.1 + 0.8 * tex


def sample_texture_shifted(texture: np.ndarray, shift: tuple[float, float]) -> np.ndarray:
    """Texture translated by a subpixel (dx, dy), bilinear with wraparound."""
    h, w = texture.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return map_coordinates(
        texture, [yy - shift[1], xx - shift[0]], order=1, mode="grid-wrap"
    )
