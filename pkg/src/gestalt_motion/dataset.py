"""Synthetic figure-ground dataset: one moving shape over a moving background.

Scenes are sampled and rendered procedurally with analytic ground truth:
the flow field equals the layer velocity of the visible layer at each
pixel, and masks are the rasterized shape.  On disk a dataset is a
manifest plus one directory per video holding grayscale frame PNGs,
mask PNGs, and Middlebury flow files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from PIL import Image

from .flow import FlowField, write_flo, read_flo
from .motion_energy import VideoVolume
from .shapes import ShapeSpec, rasterize_shape, sample_shape, sample_texture_shifted, value_noise_texture

__all__ = [
    "SceneConfig",
    "SceneSpec",
    "GroundTruth",
    "sample_scene",
    "render_scene",
    "write_dataset",
    "read_manifest",
    "split_counts",
    "load_video",
    "load_masks",
    "load_flows",
]


@dataclass(frozen=True)
class SceneConfig:
    """Sampling bounds for random scenes."""

    frame_size: tuple[int, int] = (64, 64)  # (H, W)
    duration_frames: int = 48
    frame_rate: float = 30.0
    shape_speed: tuple[float, float] = (0.8, 1.6)
    background_speed: tuple[float, float] = (0.3, 1.0)
    min_relative_speed: float = 1.0
    max_speed: float = 4.0
    shape_radius: tuple[float, float] = (8.0, 12.0)

    def validate(self):
        h, w = self.frame_size
        if self.shape_radius[1] * 2 >= min(h, w):
            raise ValueError("shape does not fit in the frame")
        for lo, hi in (self.shape_speed, self.background_speed):
            if not (0 <= lo <= hi <= self.max_speed):
                raise ValueError("speed range outside [0, max_speed]")
        if self.min_relative_speed > self.shape_speed[1] + self.background_speed[1]:
            raise ValueError("min_relative_speed unattainable for the speed ranges")


@dataclass(frozen=True)
class SceneSpec:
    """Fully determined scene: render_scene(spec) is a pure function of it."""

    seed: int
    frame_size: tuple[int, int]
    duration_frames: int
    frame_rate: float
    background_texture_seed: int
    background_velocity: tuple[float, float]
    shape: ShapeSpec
    shape_velocity: tuple[float, float]
    shape_start: tuple[float, float]

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        d = json.loads(text)
        d["shape"] = ShapeSpec(
            radii=tuple(d["shape"]["radii"]),
            rotation=d["shape"]["rotation"],
            texture_seed=d["shape"]["texture_seed"],
        )
        for key in ("frame_size", "background_velocity", "shape_velocity", "shape_start"):
            d[key] = tuple(d[key])
        return SceneSpec(**d)


@dataclass
class GroundTruth:
    """masks: (T, H, W) bool; flows: T-1 forward fields (frame t -> t+1)."""

    masks: np.ndarray
    flows: list[FlowField]


def _random_velocity(rng: np.random.Generator, speed_range: tuple[float, float]) -> np.ndarray:
    speed = rng.uniform(*speed_range)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([speed * np.cos(angle), speed * np.sin(angle)])


def sample_scene(seed: int, config: SceneConfig | None = None) -> SceneSpec:
    """Deterministic scene draw with a well-posed relative motion.

    Velocities are rejection-sampled until the shape and background
    velocities differ by at least ``min_relative_speed``; the shape path
    is centered so the shape stays at least partially in frame.
    """
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    h, w = config.frame_size
    shape = sample_shape(rng, mean_radius=rng.uniform(*config.shape_radius))

    for _ in range(1000):
        v_shape = _random_velocity(rng, config.shape_speed)
        v_bg = _random_velocity(rng, config.background_speed)
        if np.hypot(*(v_shape - v_bg)) >= config.min_relative_speed:
            break
    else:
        raise ValueError("could not satisfy min_relative_speed")

    # center the trajectory mid-video, jitter start perpendicular to motion
    t_mid = (config.duration_frames - 1) / 2.0
    center = np.array([w / 2.0, h / 2.0])
    direction = v_shape / (np.hypot(*v_shape) + 1e-12)
    perp = np.array([-direction[1], direction[0]])
    jitter = rng.uniform(-min(h, w) / 8.0, min(h, w) / 8.0)
    start = center + perp * jitter - v_shape * t_mid

    # keep the shape at least partially visible throughout
    end = start + v_shape * (config.duration_frames - 1)
    r = shape.max_radius
    for p in (start, end):
        p[0] = np.clip(p[0], -r + 2.0, w + r - 2.0)
    # recompute velocity consistent with any clamping of the endpoints
    if config.duration_frames > 1:
        v_shape = (end - start) / (config.duration_frames - 1)

    return SceneSpec(
        seed=seed,
        frame_size=config.frame_size,
        duration_frames=config.duration_frames,
        frame_rate=config.frame_rate,
        background_texture_seed=int(rng.integers(0, 2**31)),
        background_velocity=(float(v_bg[0]), float(v_bg[1])),
        shape=shape,
        shape_velocity=(float(v_shape[0]), float(v_shape[1])),
        shape_start=(float(start[0]), float(start[1])),
    )


def render_scene(spec: SceneSpec) -> tuple[VideoVolume, GroundTruth]:
    """Composite the textured shape over the drifting background.

    Both layers translate rigidly with bilinear subpixel sampling; the
    ground-truth flow at every pixel is the velocity of the layer
    visible there at frame t.
    """
    h, w = spec.frame_size
    t_frames = spec.duration_frames
    bg_tex = value_noise_texture(spec.background_texture_seed, (h, w))
    fg_tex = value_noise_texture(spec.shape.texture_seed, (h, w), octaves=(6, 12))
    v_bg = np.array(spec.background_velocity)
    v_fg = np.array(spec.shape_velocity)
    start = np.array(spec.shape_start)

    frames = np.empty((t_frames, h, w))
    masks = np.empty((t_frames, h, w), dtype=bool)
    for t in range(t_frames):
        bg = sample_texture_shifted(bg_tex, tuple(v_bg * t))
        fg = sample_texture_shifted(fg_tex, tuple(v_fg * t))
        center = start + v_fg * t
        mask = rasterize_shape(spec.shape, (h, w), tuple(center))
        frames[t] = np.where(mask, fg, bg)
        masks[t] = mask

    flows = []
    for t in range(t_frames - 1):
        u = np.where(masks[t], v_fg[0], v_bg[0])
        v = np.where(masks[t], v_fg[1], v_bg[1])
        flows.append(FlowField(u, v))
    return VideoVolume(frames, frame_rate=spec.frame_rate), GroundTruth(masks, flows)


def split_counts(n: int, train_fraction: float = 0.9) -> tuple[int, int]:
    """Round the train share to the nearest integer; remainder is test."""
    train = int(round(n * train_fraction))
    train = min(max(train, 0), n)
    return train, n - train


def _save_gray_png(path: Path, values: np.ndarray):
    img = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def write_dataset(
    scenes: list[SceneSpec],
    directory: str | Path,
    train_fraction: float = 0.9,
) -> Path:
    """Render and store scenes; returns the manifest path.

    Layout per video: frames/%05d.png (8-bit grayscale), masks/%05d.png
    (0/255), flow/%05d.flo (ground truth, frame t -> t+1), scene.json.
    The manifest lists one ``<split>\\t<video_dir>`` line per video.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_train, _ = split_counts(len(scenes), train_fraction)
    lines = []
    for i, spec in enumerate(scenes):
        split = "train" if i < n_train else "test"
        name = f"videos/{split}_{i:04d}"
        vdir = directory / name
        for sub in ("frames", "masks", "flow"):
            (vdir / sub).mkdir(parents=True, exist_ok=True)
        video, gt = render_scene(spec)
        for t in range(video.num_frames):
            _save_gray_png(vdir / "frames" / f"{t:05d}.png", video.frames[t])
            _save_gray_png(vdir / "masks" / f"{t:05d}.png", gt.masks[t].astype(float))
        for t, fl in enumerate(gt.flows):
            write_flo(fl, vdir / "flow" / f"{t:05d}.flo")
        (vdir / "scene.json").write_text(spec.to_json())
        lines.append(f"{split}\t{name}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(manifest: str | Path) -> dict[str, list[Path]]:
    """Parse the manifest into {'train': [video dirs], 'test': [...]}."""
    manifest = Path(manifest)
    root = manifest.parent
    out: dict[str, list[Path]] = {"train": [], "test": []}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            split, rel = line.split("\t")
        except ValueError:
            raise ValueError(f"{manifest}:{lineno}: expected '<split>\\t<video_dir>'")
        out.setdefault(split, []).append(root / rel)
    return out


def load_video(video_dir: str | Path, subdir: str = "frames") -> np.ndarray:
    """Stack the PNG frames of a video directory into (T, H, W) in [0, 1]."""
    paths = sorted((Path(video_dir) / subdir).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no frames under {video_dir}/{subdir}")
    frames = [np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0 for p in paths]
    return np.stack(frames)


def load_masks(video_dir: str | Path) -> np.ndarray:
    return load_video(video_dir, "masks") > 0.5


def load_flows(video_dir: str | Path) -> list[FlowField]:
    paths = sorted((Path(video_dir) / "flow").glob("*.flo"))
    return [read_flo(p) for p in paths]
