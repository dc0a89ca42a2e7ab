"""Random-dot kinematograms: motion preserved, static appearance destroyed.

A fixed population of limited-lifetime dots is advected by a flow field;
expired or out-of-frame dots respawn uniformly.  Rendering a frame gives
no information about scene content beyond the dot positions themselves.
Also provides the 2AFC shape-identification trial generator: a single
shape translating through the frame center, shown only through dots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowField, sample_flow
from .motion_energy import VideoVolume
from .shapes import ShapeSpec, rasterize_shape, sample_shape

__all__ = [
    "DotConfig",
    "DotField",
    "init_dots",
    "advance_dots",
    "render_dots",
    "make_kinematogram",
    "ShapeTrialConfig",
    "ShapeTrial",
    "make_shape_trial",
]


@dataclass(frozen=True)
class DotConfig:
    num_dots: int = 500
    lifetime: int = 8
    radius: float = 1.5  # white-on-black antialiased discs


@dataclass
class DotField:
    """Dot population: subpixel positions and ages in frames since spawn."""

    x: np.ndarray
    y: np.ndarray
    age: np.ndarray
    extent: tuple[int, int]  # (H, W)

    def __len__(self) -> int:
        return len(self.x)


def init_dots(n: int, extent: tuple[int, int], rng: np.random.Generator,
              lifetime: int = 8) -> DotField:
    """Uniform positions; ages staggered over [0, lifetime) so that
    expirations spread evenly over frames."""
    if n < 1:
        raise ValueError("need at least one dot")
    h, w = extent
    return DotField(
        x=rng.uniform(0.0, w, n),
        y=rng.uniform(0.0, h, n),
        age=rng.integers(0, lifetime, n),
        extent=extent,
    )


def advance_dots(
    dots: DotField, flow: FlowField, lifetime: int, rng: np.random.Generator
) -> DotField:
    """One time step: advect by the flow, age, respawn expired/escaped dots.

    Each dot moves by the flow sampled bilinearly at its position.  Dots
    reaching ``lifetime`` or advected outside the extent respawn at a
    uniform position with age 0; the population size never changes.
    """
    h, w = dots.extent
    if flow.shape != (h, w):
        raise ValueError(f"flow extent {flow.shape} != dot extent {(h, w)}")
    du, dv = sample_flow(flow, dots.x, dots.y)
    x = dots.x + du
    y = dots.y + dv
    age = dots.age + 1
    dead = (age >= lifetime) | (x < 0) | (x >= w) | (y < 0) | (y >= h)
    n_dead = int(dead.sum())
    if n_dead:
        x = x.copy()
        y = y.copy()
        age = age.copy()
        x[dead] = rng.uniform(0.0, w, n_dead)
        y[dead] = rng.uniform(0.0, h, n_dead)
        age[dead] = 0
    return DotField(x, y, age, dots.extent)


def render_dots(dots: DotField, size: tuple[int, int] | None = None,
                dot_radius: float = 1.5) -> np.ndarray:
    """White discs on black, antialiased by a linear coverage ramp.

    Per-pixel intensity is the maximum coverage over dots, so coincident
    dots render identically to one dot and values stay clamped at 1.
    """
    if dot_radius < 0.5:
        raise ValueError("dot radius must be >= 0.5 px")
    h, w = size or dots.extent
    frame = np.zeros((h, w))
    r = dot_radius
    for xi, yi in zip(dots.x, dots.y):
        x0 = max(int(np.floor(xi - r - 1)), 0)
        y0 = max(int(np.floor(yi - r - 1)), 0)
        x1 = min(int(np.ceil(xi + r + 1)) + 1, w)
        y1 = min(int(np.ceil(yi + r + 1)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d = np.hypot(yy - yi, xx - xi)
        coverage = np.clip(r + 0.5 - d, 0.0, 1.0)
        np.maximum(frame[y0:y1, x0:x1], coverage, out=frame[y0:y1, x0:x1])
    return frame


def make_kinematogram(
    flows: list[FlowField],
    config: DotConfig | None = None,
    rng: np.random.Generator | int | None = None,
    return_fields: bool = False,
):
    """Dot stimulus following a flow sequence; len(flows) + 1 frames.

    The displacement of every surviving dot between consecutive frames
    equals the flow sampled at its position, so the stimulus carries
    exactly the source motion while each individual frame is just a
    uniform random dot pattern.  With ``return_fields`` the per-frame
    dot populations are returned alongside the rendered volume.
    """
    if not flows:
        raise ValueError("need at least one flow field")
    config = config or DotConfig()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    extent = flows[0].shape
    dots = init_dots(config.num_dots, extent, rng, config.lifetime)
    fields = [dots]
    frames = [render_dots(dots, dot_radius=config.radius)]
    for fl in flows:
        dots = advance_dots(dots, fl, config.lifetime, rng)
        fields.append(dots)
        frames.append(render_dots(dots, dot_radius=config.radius))
    volume = VideoVolume(np.stack(frames))
    return (volume, fields) if return_fields else volume


@dataclass(frozen=True)
class ShapeTrialConfig:
    frame_size: tuple[int, int] = (64, 64)
    duration_frames: int = 30  # 1 s at 30 Hz
    frame_rate: float = 30.0
    speed: tuple[float, float] = (0.5, 1.2)
    background_velocity: tuple[float, float] = (0.0, 0.0)
    shape_radius: tuple[float, float] = (7.0, 11.0)
    dots: DotConfig = field(default_factory=DotConfig)

    def validate(self):
        if self.speed[0] <= 0:
            raise ValueError("minimum trial speed must be positive")
        if self.speed[0] > self.speed[1]:
            raise ValueError("bad speed range")


@dataclass
class ShapeTrial:
    """One 2AFC trial: dot stimulus of the target; distractor never shown."""

    seed: int
    target: ShapeSpec
    distractor: ShapeSpec
    direction: float  # radians
    speed: float  # pixels/frame
    stimulus: VideoVolume
    masks: np.ndarray  # (T, H, W) target mask per frame
    final_center: tuple[float, float]
    final_dots: np.ndarray  # (N, 2) dot positions (x, y) at the last frame
    correct_choice: str = "target"

    @property
    def final_target_mask(self) -> np.ndarray:
        return self.masks[-1]

    def final_distractor_mask(self) -> np.ndarray:
        h, w = self.masks.shape[1:]
        return rasterize_shape(self.distractor, (h, w), self.final_center)

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "direction": self.direction,
            "speed": self.speed,
            "duration_frames": int(self.stimulus.num_frames),
            "frame_rate": self.stimulus.frame_rate,
            "correct_choice": self.correct_choice,
            "final_center": list(self.final_center),
        }


def make_shape_trial(
    rng: np.random.Generator | int, config: ShapeTrialConfig | None = None
) -> ShapeTrial:
    """Sample two distinct shapes and animate the target through the center.

    The dot stimulus follows the layered flow: shape velocity inside the
    target's mask, background velocity (default zero) outside.
    """
    config = config or ShapeTrialConfig()
    config.validate()
    seed = rng if isinstance(rng, int) else None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h, w = config.frame_size
    target = sample_shape(rng, mean_radius=rng.uniform(*config.shape_radius))
    distractor = sample_shape(rng, mean_radius=rng.uniform(*config.shape_radius))
    direction = float(rng.uniform(0.0, 2.0 * np.pi))
    speed = float(rng.uniform(*config.speed))
    velocity = np.array([speed * np.cos(direction), speed * np.sin(direction)])
    t_frames = config.duration_frames
    t_mid = (t_frames - 1) / 2.0
    start = np.array([w / 2.0, h / 2.0]) - velocity * t_mid

    masks = np.empty((t_frames, h, w), dtype=bool)
    centers = [start + velocity * t for t in range(t_frames)]
    for t, c in enumerate(centers):
        masks[t] = rasterize_shape(target, (h, w), tuple(c))

    v_bg = np.array(config.background_velocity)
    flows = []
    for t in range(t_frames - 1):
        u = np.where(masks[t], velocity[0], v_bg[0])
        v = np.where(masks[t], velocity[1], v_bg[1])
        flows.append(FlowField(u, v))
    stimulus, fields = make_kinematogram(flows, config.dots, rng, return_fields=True)

    return ShapeTrial(
        seed=seed if seed is not None else -1,
        target=target,
        distractor=distractor,
        direction=direction,
        speed=speed,
        stimulus=stimulus,
        masks=masks,
        final_center=tuple(float(c) for c in centers[-1]),
        final_dots=np.stack([fields[-1].x, fields[-1].y], axis=1),
    )
