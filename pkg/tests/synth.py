"""Synthetic test stimuli: drifting gratings, plaids, and textures.

These are the independent oracles for velocity tuning: a rigidly
translating pattern concentrates its spatiotemporal spectrum on the
plane determined by its velocity, so the tuned channel is known by
construction rather than by running the model.
"""

import numpy as np
from scipy.ndimage import map_coordinates

from gestalt_motion.shapes import value_noise_texture


def drifting_grating(
    velocity, size=64, num_frames=9, omega=1.1, contrast=0.4, orientation=None
):
    """Single sinusoid translating at ``velocity``.

    The spatial frequency vector is parallel to the velocity by default
    (normal flow equals the true velocity); ``omega`` sets the 3D
    frequency magnitude in rad/px so the stimulus sits in the filter
    passband regardless of speed.
    """
    vx, vy = velocity
    if orientation is None:
        orientation = np.arctan2(vy, vx) if np.hypot(vx, vy) > 0 else 0.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kx, ky = np.cos(orientation), np.sin(orientation)
    wt = kx * vx + ky * vy
    cycles = omega / (2 * np.pi) / np.sqrt(1.0 + wt * wt)
    frames = np.empty((num_frames, size, size))
    for t in range(num_frames):
        phase = 2 * np.pi * cycles * (kx * xx + ky * yy - wt * t)
        frames[t] = 0.5 + contrast * np.cos(phase)
    return np.clip(frames, 0.0, 1.0)


def drifting_plaid(
    velocity, size=64, num_frames=9, half_angle_deg=30.0, omega=1.1, contrast=0.25
):
    """Two superimposed gratings translating at the same velocity.

    Their frequency-domain constraint lines intersect only at
    ``velocity``, so unlike a single grating the stimulus identifies the
    velocity uniquely (the intersection-of-constraints configuration).
    A zero velocity gets two orthogonal static components.
    """
    vx, vy = velocity
    speed = np.hypot(vx, vy)
    if speed > 0:
        base = np.arctan2(vy, vx)
        half = np.deg2rad(half_angle_deg)
        orientations = [base + half, base - half]
    else:
        orientations = [0.0, np.pi / 2]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = np.full((num_frames, size, size), 0.5)
    for i, angle in enumerate(orientations):
        kx, ky = np.cos(angle), np.sin(angle)
        wt = kx * vx + ky * vy
        cycles = omega / (2 * np.pi) / np.sqrt(1.0 + wt * wt)
        for t in range(num_frames):
            phase = 2 * np.pi * cycles * (kx * xx + ky * yy - wt * t) + 0.7 * (i + 1)
            frames[t] += contrast * np.cos(phase)
    return np.clip(frames, 0.0, 1.0)


def drifting_texture(velocity, size=64, num_frames=9, seed=0):
    """Broadband value-noise texture translating rigidly at ``velocity``."""
    tex = value_noise_texture(seed, (size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = [
        map_coordinates(
            tex, [yy - velocity[1] * t, xx - velocity[0] * t], order=1, mode="grid-wrap"
        )
        for t in range(num_frames)
    ]
    return np.stack(frames)
