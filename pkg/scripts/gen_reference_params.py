#!/usr/bin/env python3
"""Regenerate the motion-energy reference parameter file.

Writes src/gestalt_motion/params/simoncelli_heeger.txt from the analytic
construction: sampled Gaussian-derivative taps, a Fibonacci hemisphere of
28 space-time orientations, and a log-spaced-speed x uniform-direction
velocity grid.  Run after changing any constant below, then re-run the
tuning oracle (tests/test_motion_energy.py) to revalidate the bank.
"""

import argparse
from pathlib import Path

import numpy as np

from gestalt_motion.filterbank import write_parameter_file

SPATIAL_SIGMA = 1.0
SPATIAL_RADIUS = 3
TEMPORAL_SIGMA = 1.25
TEMPORAL_RADIUS = 4  # 9 taps -> 9-frame input window
N_DIRECTIONS = 28
SPEEDS = (0.5, 1.0, 2.0)
N_VELOCITY_DIRECTIONS = 8
MT_TUNING_SIGMA = 0.30
SIGMA_SQ_V1 = 1e-5
SIGMA_SQ_MT = 1e-2
V1_BLUR_SIGMA, V1_BLUR_RADIUS = 1.5, 4
MT_BLUR_SIGMA, MT_BLUR_RADIUS = 3.0, 6

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def gaussian_derivative_taps(sigma: float, radius: int, order: int) -> np.ndarray:
    """Sampled derivative of a unit-sum Gaussian; even orders DC-corrected."""
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    s2 = sigma * sigma
    if order == 0:
        return g
    if order == 1:
        k = -x / s2 * g
    elif order == 2:
        k = (x * x - s2) / s2**2 * g
    elif order == 3:
        k = -(x**3 - 3 * s2 * x) / s2**3 * g
    else:
        raise ValueError(order)
    if order % 2 == 0:
        k = k - k.sum() / k.size
    return k


def hemisphere_directions(n: int) -> np.ndarray:
    """Near-uniform unit vectors on the upper (dt > 0 ... dt ~ 0) hemisphere.

    Orientation energy is antipodally symmetric after squaring, so one
    hemisphere covers all space-time orientations.
    """
    i = np.arange(n)
    z = (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    th = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)


def velocity_grid(speeds, n_dirs) -> np.ndarray:
    """Zero velocity plus log-spaced speeds x uniformly spaced directions."""
    vels = [(0.0, 0.0)]
    for s in speeds:
        for k in range(n_dirs):
            a = 2 * np.pi * k / n_dirs
            vels.append((s * np.cos(a), s * np.sin(a)))
    return np.array(vels)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    default_out = (
        Path(__file__).resolve().parent.parent
        / "src" / "gestalt_motion" / "params" / "simoncelli_heeger.txt"
    )
    parser.add_argument("--out", type=Path, default=default_out)
    args = parser.parse_args()

    values = {}
    for order in range(4):
        values[f"spatial_taps_order{order}"] = gaussian_derivative_taps(
            SPATIAL_SIGMA, SPATIAL_RADIUS, order
        )
        values[f"temporal_taps_order{order}"] = gaussian_derivative_taps(
            TEMPORAL_SIGMA, TEMPORAL_RADIUS, order
        )
    values["directions"] = hemisphere_directions(N_DIRECTIONS)
    values["velocities"] = velocity_grid(SPEEDS, N_VELOCITY_DIRECTIONS)
    values["mt_tuning_sigma"] = np.array([MT_TUNING_SIGMA])
    values["sigma_sq_v1"] = np.array([SIGMA_SQ_V1])
    values["sigma_sq_mt"] = np.array([SIGMA_SQ_MT])
    values["v1_blur"] = gaussian_derivative_taps(V1_BLUR_SIGMA, V1_BLUR_RADIUS, 0)
    values["mt_blur"] = gaussian_derivative_taps(MT_BLUR_SIGMA, MT_BLUR_RADIUS, 0)

    header = (
        "Motion energy model reference parameters.\n"
        "Generated by scripts/gen_reference_params.py; do not edit by hand.\n"
        "V1: third-order Gaussian-derivative filters at 28 space-time orientations.\n"
        "MT: intersection-of-constraints weights over a 25-velocity grid.\n"
        "Validated by the drifting-plaid tuning oracle in the test suite."
    )
    write_parameter_file(args.out, values, header=header)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
