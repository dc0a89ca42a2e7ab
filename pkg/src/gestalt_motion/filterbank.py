"""Spatiotemporal filter bank for the two-stage motion energy model.

The bank follows the classic Simoncelli-Heeger construction: the first
(V1) stage consists of third-order directional derivatives of a 3D
Gaussian, expressed as linear combinations of ten separable basis
kernels; the second (MT) stage combines the V1 channels into
velocity-tuned units via an intersection-of-constraints weighting.

All numeric content (kernel taps, preferred orientations, preferred
velocities, semisaturation constants) lives in a plain-text parameter
file shipped with the package (``params/simoncelli_heeger.txt``) and is
loaded at build time rather than hardcoded.  ``scripts/gen_reference_params.py``
regenerates the file from the analytic construction.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from math import factorial
from pathlib import Path

import numpy as np

__all__ = [
    "FilterBank",
    "ParameterFileError",
    "build_filter_bank",
    "default_parameter_path",
    "load_parameter_file",
    "write_parameter_file",
    "basis_exponents",
    "direction_weights",
    "velocity_weights",
]

DEFAULT_PARAMS = "simoncelli_heeger.txt"


class ParameterFileError(ValueError):
    """Raised when a filter-bank parameter file cannot be parsed or is invalid."""


def basis_exponents() -> list[tuple[int, int, int]]:
    """Derivative-order triples (x, y, t) of the separable V1 basis.

    All combinations with orders summing to 3; ten kernels total.
    """
    return [(a, b, 3 - a - b) for a in range(4) for b in range(4 - a)]


def direction_weights(directions: np.ndarray) -> np.ndarray:
    """Combination weights turning the separable basis into oriented filters.

    The third directional derivative along a unit vector d expands over
    the separable basis with multinomial coefficients:

        (dx ∂x + dy ∂y + dt ∂t)^3 = Σ 3!/(a! b! c!) dx^a dy^b dt^c ∂x^a ∂y^b ∂t^c

    Returns an (n_directions, 10) matrix, rows matching ``directions``,
    columns matching :func:`basis_exponents`.
    """
    exps = basis_exponents()
    w = np.empty((len(directions), len(exps)), dtype=np.float64)
    for j, (a, b, c) in enumerate(exps):
        m = factorial(3) / (factorial(a) * factorial(b) * factorial(c))
        w[:, j] = m * directions[:, 0] ** a * directions[:, 1] ** b * directions[:, 2] ** c
    return w


def velocity_weights(
    directions: np.ndarray, velocities: np.ndarray, tuning_sigma: float
) -> np.ndarray:
    """Intersection-of-constraints weights from V1 channels to velocity channels.

    A stimulus translating at velocity v has all its spatiotemporal
    frequency energy on the plane through the origin with unit normal
    n_v ∝ (vx, vy, 1).  A V1 channel oriented along d is therefore
    consistent with v to the degree that d lies in that plane.  The
    weight of channel d for velocity v is a Gaussian in the off-plane
    component c = d·n_v, mean-subtracted per velocity so that an
    isotropic population response cancels:

        w(d, v) = exp(-c² / (2σ²)) - mean over the V1 population

    Returns an (n_velocities, n_directions) matrix.
    """
    if tuning_sigma <= 0:
        raise ParameterFileError("mt tuning sigma must be positive")
    normals = np.concatenate([velocities, np.ones((len(velocities), 1))], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    c = normals @ directions.T
    w = np.exp(-(c * c) / (2.0 * tuning_sigma * tuning_sigma))
    return w - w.mean(axis=1, keepdims=True)


@dataclass(frozen=True)
class FilterBank:
    """Immutable weights and constants of the motion energy pipeline.

    Attributes
    ----------
    spatial_taps : (4, ks) array, rows are derivative orders 0..3 along x/y.
    temporal_taps : (4, kt) array, rows are derivative orders 0..3 along t.
        ``kt`` fixes the model's temporal input window.
    directions : (n_v1, 3) unit vectors, preferred space-time orientations.
    v1_direction_weights : (n_v1, 10) basis-combination matrix.
    velocities : (n_mt, 2) preferred velocities in pixels/frame (contains 0).
    mt_weights : (n_mt, n_v1) intersection-of-constraints matrix.
    v1_blur, mt_blur : 1D spatial pooling taps, each summing to 1.
    sigma_sq_v1, sigma_sq_mt : divisive-normalization semisaturation constants.
    mt_tuning_sigma : width of the constraint-plane weighting profile.
    """

    spatial_taps: np.ndarray
    temporal_taps: np.ndarray
    directions: np.ndarray
    velocities: np.ndarray
    v1_blur: np.ndarray
    mt_blur: np.ndarray
    sigma_sq_v1: float
    sigma_sq_mt: float
    mt_tuning_sigma: float
    v1_direction_weights: np.ndarray = field(init=False)
    mt_weights: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "v1_direction_weights", direction_weights(self.directions)
        )
        object.__setattr__(
            self,
            "mt_weights",
            velocity_weights(self.directions, self.velocities, self.mt_tuning_sigma),
        )
        self._validate()

    @property
    def n_v1(self) -> int:
        return len(self.directions)

    @property
    def n_mt(self) -> int:
        return len(self.velocities)

    @property
    def temporal_extent(self) -> int:
        return self.temporal_taps.shape[1]

    def zero_velocity_channel(self) -> int:
        """Index of the channel tuned to zero velocity."""
        speeds = np.hypot(self.velocities[:, 0], self.velocities[:, 1])
        k = int(np.argmin(speeds))
        if speeds[k] > 0:
            raise ValueError("bank has no zero-velocity channel")
        return k

    def basis_kernel(self, a: int, b: int, c: int) -> np.ndarray:
        """Full 3D basis kernel (t, y, x) for derivative orders (a=x, b=y, c=t)."""
        return (
            self.temporal_taps[c][:, None, None]
            * self.spatial_taps[b][None, :, None]
            * self.spatial_taps[a][None, None, :]
        )

    def _validate(self):
        for name in ("sigma_sq_v1", "sigma_sq_mt"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ParameterFileError(f"{name} must be positive and finite, got {v}")
        for name in ("v1_blur", "mt_blur"):
            taps = getattr(self, name)
            if not np.all(np.isfinite(taps)):
                raise ParameterFileError(f"{name} has non-finite taps")
            if abs(taps.sum() - 1.0) > 1e-12:
                raise ParameterFileError(f"{name} does not sum to 1")
        # derivative kernels must reject DC exactly
        for taps_set in (self.spatial_taps, self.temporal_taps):
            for order in range(1, 4):
                if abs(taps_set[order].sum()) > 1e-12:
                    raise ParameterFileError(
                        f"order-{order} derivative taps have nonzero sum"
                    )
        if not np.all(np.isfinite(self.mt_weights)):
            raise ParameterFileError("mt_weights contain non-finite values")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ParameterFileError("directions must be unit vectors")
        self.zero_velocity_channel()


def default_parameter_path() -> Path:
    return Path(importlib.resources.files("gestalt_motion") / "params" / DEFAULT_PARAMS)


def load_parameter_file(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a key-value parameter file.

    Lines are ``name = v0 v1 ...`` (a scalar or flat vector) or
    ``name = R C : v0 v1 ...`` (a row-major R-by-C matrix).  ``#`` starts
    a comment; blank lines are ignored.
    """
    values: dict[str, np.ndarray] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterFileError(f"{path}:{lineno}: expected 'name = values'")
        name, rhs = (s.strip() for s in line.split("=", 1))
        try:
            if ":" in rhs:
                dims, flat = rhs.split(":", 1)
                r, c = (int(t) for t in dims.split())
                data = np.array(flat.split(), dtype=np.float64)
                if data.size != r * c:
                    raise ValueError(f"expected {r * c} values, got {data.size}")
                values[name] = data.reshape(r, c)
            else:
                data = np.array(rhs.split(), dtype=np.float64)
                if data.size == 0:
                    raise ValueError("no numeric values")
                values[name] = data
        except ValueError as e:
            raise ParameterFileError(f"{path}:{lineno}: {e}") from None
    return values


def write_parameter_file(path: str | Path, values: dict[str, np.ndarray], header: str = ""):
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    for name, arr in values.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            flat = " ".join(repr(float(v)) for v in arr.ravel())
            lines.append(f"{name} = {arr.shape[0]} {arr.shape[1]} : {flat}")
        else:
            flat = " ".join(repr(float(v)) for v in np.atleast_1d(arr))
            lines.append(f"{name} = {flat}")
    Path(path).write_text("\n".join(lines) + "\n")


def _scalar(values: dict[str, np.ndarray], name: str) -> float:
    if name not in values:
        raise ParameterFileError(f"missing parameter '{name}'")
    v = values[name]
    if v.size != 1:
        raise ParameterFileError(f"parameter '{name}' must be a scalar")
    return float(v.reshape(-1)[0])


def _taps_matrix(values: dict[str, np.ndarray], prefix: str) -> np.ndarray:
    rows = []
    for order in range(4):
        key = f"{prefix}_order{order}"
        if key not in values:
            raise ParameterFileError(f"missing parameter '{key}'")
        rows.append(np.atleast_1d(values[key]))
    widths = {r.size for r in rows}
    if len(widths) != 1:
        raise ParameterFileError(f"{prefix} taps have inconsistent lengths")
    return np.stack(rows)


def _normalized_blur(values: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in values:
        raise ParameterFileError(f"missing parameter '{name}'")
    taps = np.atleast_1d(values[name]).astype(np.float64)
    s = taps.sum()
    if not np.isfinite(s) or s <= 0:
        raise ParameterFileError(f"{name} is not normalizable (sum={s})")
    return taps / s


def build_filter_bank(
    params_path: str | Path | None = None, overrides: dict | None = None
) -> FilterBank:
    """Build the bank from a parameter file, with optional field overrides.

    ``overrides`` may replace any :class:`FilterBank` constructor field,
    e.g. ``{"velocities": my_array}`` or ``{"sigma_sq_mt": 0.02}``.
    Construction is deterministic.
    """
    path = Path(params_path) if params_path is not None else default_parameter_path()
    values = load_parameter_file(path)
    if "directions" not in values or values["directions"].ndim != 2:
        raise ParameterFileError("missing or malformed 'directions' matrix")
    if "velocities" not in values or values["velocities"].ndim != 2:
        raise ParameterFileError("missing or malformed 'velocities' matrix")
    kwargs = dict(
        spatial_taps=_taps_matrix(values, "spatial_taps"),
        temporal_taps=_taps_matrix(values, "temporal_taps"),
        directions=values["directions"],
        velocities=values["velocities"],
        v1_blur=_normalized_blur(values, "v1_blur"),
        mt_blur=_normalized_blur(values, "mt_blur"),
        sigma_sq_v1=_scalar(values, "sigma_sq_v1"),
        sigma_sq_mt=_scalar(values, "sigma_sq_mt"),
        mt_tuning_sigma=_scalar(values, "mt_tuning_sigma"),
    )
    if overrides:
        unknown = set(overrides) - set(kwargs)
        if unknown:
            raise ParameterFileError(f"unknown override(s): {sorted(unknown)}")
        kwargs.update(overrides)
    return FilterBank(**kwargs)
