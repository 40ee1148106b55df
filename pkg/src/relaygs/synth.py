"""Synthetic multi-view dynamic scenes with known decomposition and motion.

Ground-truth images are rendered with this package's own rasterizer, so the
scenes test recovery of structure and motion, not photometric realism.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .rasterizer import rasterize
from .scene import Camera, ConfigError, FrameSet, GaussianCloud, normalized_time

TRAJECTORIES = ("static", "linear", "circular", "hops")


@dataclass
class Trajectory:
    """Component-center path over normalized time.

    ``amplitude`` is measured in component radii: the full displacement for
    linear and hops, the orbit radius for circular. ``hops`` is piecewise
    constant, one waypoint per segment of ``segment_length`` frames spread
    evenly along ``direction``.
    """

    kind: str = "static"
    start: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    amplitude: float = 0.0
    turns: float = 1.0
    segment_length: int = 16

    def __post_init__(self):
        if self.kind not in TRAJECTORIES:
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class BackgroundComponent:
    kind: str = "plane"  # plane | box
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: Tuple[float, float, float] = (4.0, 4.0, 0.0)
    count: int = 200
    palette: Tuple[Tuple[float, float, float], ...] = ((0.55, 0.55, 0.5), (0.25, 0.3, 0.35))


@dataclass
class ForegroundComponent:
    radius: float = 0.3
    count: int = 30
    color: Tuple[float, float, float] = (0.9, 0.25, 0.15)
    trajectory: Trajectory = field(default_factory=Trajectory)


@dataclass
class SceneSpec:
    seed: int = 0
    n_cameras: int = 8
    ring_radius: float = 5.0
    camera_height: float = 3.0
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.2)
    image_size: int = 64
    focal: float = 60.0
    frame_count: int = 64
    background: List[BackgroundComponent] = field(default_factory=list)
    foreground: List[ForegroundComponent] = field(default_factory=list)
    color_perturbation: float = 0.0
    background_color: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        bg = [BackgroundComponent(**{k: tuple(map(tuple, v)) if k == "palette" else
                                     (tuple(v) if isinstance(v, list) else v) for k, v in c.items()})
              for c in d.pop("background", [])]
        fg = []
        for c in d.pop("foreground", []):
            c = dict(c)
            traj = Trajectory(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.pop("trajectory", {}).items()})
            fg.append(ForegroundComponent(trajectory=traj, **{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()}))
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(background=bg, foreground=fg, **d)


def default_background() -> List[BackgroundComponent]:
    return [
        BackgroundComponent("plane", (0.0, 0.0, 0.0), (4.4, 4.4, 0.0), 220,
                            ((0.62, 0.6, 0.52), (0.22, 0.3, 0.4), (0.35, 0.5, 0.3))),
        BackgroundComponent("box", (1.7, 1.7, 0.4), (0.4, 0.4, 0.8), 20, ((0.2, 0.35, 0.8),)),
        BackgroundComponent("box", (-1.7, 1.7, 0.4), (0.4, 0.4, 0.8), 20, ((0.85, 0.8, 0.2),)),
        BackgroundComponent("box", (1.7, -1.7, 0.4), (0.4, 0.4, 0.8), 20, ((0.8, 0.8, 0.8),)),
        BackgroundComponent("box", (-1.7, -1.7, 0.4), (0.4, 0.4, 0.8), 20, ((0.3, 0.75, 0.75),)),
    ]


def desk_scene(seed: int = 0, motion: str = "linear", amplitude: float = 10.0,
               frame_count: int = 64, k: int = 16, **overrides) -> SceneSpec:
    """Default desk scene: ~300 static Gaussians and one ~30-Gaussian blob.

    ``motion`` in {static, linear, circular, hops}; the blob crosses the
    ground along the x axis (or orbits the origin).
    """
    radius = 0.3
    if motion == "static":
        traj = Trajectory("static", (-1.2, -0.3, 0.45))
    elif motion == "circular":
        traj = Trajectory("circular", (0.0, 0.0, 0.45), amplitude=amplitude / (2 * math.pi))
    else:
        span = amplitude * radius
        traj = Trajectory(motion, (-span / 2, -0.3, 0.45), (1.0, 0.0, 0.0), amplitude, segment_length=k)
    spec = SceneSpec(seed=seed, frame_count=frame_count, background=default_background(),
                     foreground=[ForegroundComponent(radius, 30, (0.92, 0.3, 0.15), traj)])
    for key, val in overrides.items():
        setattr(spec, key, val)
    return spec


def ground_truth_position(component: ForegroundComponent, t: float, frame_count: Optional[int] = None) -> np.ndarray:
    """Center of a foreground component at normalized time t in [0, 1]."""
    if not isinstance(component, ForegroundComponent):
        raise KeyError(f"unknown component {component!r}")
    traj = component.trajectory
    start = np.asarray(traj.start, dtype=np.float64)
    direction = np.asarray(traj.direction, dtype=np.float64)
    n = np.linalg.norm(direction)
    direction = direction / n if n > 0 else direction
    span = traj.amplitude * component.radius
    if traj.kind == "static" or traj.amplitude == 0:
        return start.copy()
    if traj.kind == "linear":
        return start + t * span * direction
    if traj.kind == "circular":
        ang = 2.0 * math.pi * traj.turns * t
        return start + span * np.array([math.cos(ang), math.sin(ang), 0.0])
    if frame_count is None:
        raise ValueError("hops trajectories need the frame count")
    frame = int(round(t * (frame_count - 1))) + 1
    n_seg = math.ceil(frame_count / traj.segment_length)
    seg = (frame - 1) // traj.segment_length
    frac = seg / (n_seg - 1) if n_seg > 1 else 0.0
    return start + frac * span * direction


@dataclass
class GroundTruth:
    """Static Gaussians plus foreground Gaussians stored relative to their
    component center."""

    spec: SceneSpec
    static: GaussianCloud
    static_component: np.ndarray
    fg_offsets: List[GaussianCloud]

    @property
    def n_components(self) -> int:
        return len(self.spec.background) + len(self.spec.foreground)

    def component_radius(self, i: int) -> float:
        """Offset extent of a foreground blob plus the largest member scale."""
        off = self.fg_offsets[i]
        return float((off.position.norm(dim=-1) + torch.exp(off.log_scale).max(dim=-1).values).max())

    def cloud_at(self, t: float) -> GaussianCloud:
        parts = [self.static]
        for comp, off in zip(self.spec.foreground, self.fg_offsets):
            c = off.clone()
            c.position = c.position + torch.as_tensor(ground_truth_position(comp, t, self.spec.frame_count))
            parts.append(c)
        return GaussianCloud.concat(parts)

    def labels(self) -> Dict[str, np.ndarray]:
        """Per ground-truth Gaussian: component index and dynamic flag (cloud_at order)."""
        comp = [self.static_component]
        dyn = [np.zeros(len(self.static), dtype=bool)]
        nb = len(self.spec.background)
        for i, (c, off) in enumerate(zip(self.spec.foreground, self.fg_offsets)):
            comp.append(np.full(len(off), nb + i))
            dyn.append(np.full(len(off), c.trajectory.kind != "static" and c.trajectory.amplitude > 0))
        return {"component": np.concatenate(comp), "dynamic": np.concatenate(dyn)}


def make_cameras(spec: SceneSpec, rng: Optional[np.random.Generator] = None) -> List[Camera]:
    if spec.n_cameras < 4:
        raise ConfigError("need at least 4 cameras for multi-view coverage")
    cams = []
    for i in range(spec.n_cameras):
        ang = 2.0 * math.pi * i / spec.n_cameras + 0.3
        eye = (spec.ring_radius * math.cos(ang), spec.ring_radius * math.sin(ang), spec.camera_height)
        cam = Camera.look_at(eye, spec.look_at, width=spec.image_size, height=spec.image_size, focal=spec.focal)
        if spec.color_perturbation and rng is not None:
            amp = spec.color_perturbation
            cam.color_gain = torch.as_tensor(1.0 + rng.uniform(-amp, amp, 3))
            cam.color_bias = torch.as_tensor(rng.uniform(-amp / 2, amp / 2, 3))
        cams.append(cam)
    return cams


def _quat_random(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _background(comp: BackgroundComponent, rng) -> GaussianCloud:
    n = comp.count
    center = np.asarray(comp.center)
    size = np.asarray(comp.size)
    pal = np.asarray(comp.palette, dtype=np.float64)
    if comp.kind == "plane":
        side = int(math.ceil(math.sqrt(n)))
        gx, gy = np.meshgrid(np.linspace(-0.5, 0.5, side), np.linspace(-0.5, 0.5, side))
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]
        pts = pts + rng.uniform(-0.25, 0.25, pts.shape) / side
        pos = center + np.concatenate([pts * size[:2], np.zeros((n, 1))], axis=1)
        cell = size[:2].max() / side
        log_scale = np.log(np.column_stack([np.full(n, 0.6 * cell), np.full(n, 0.6 * cell), np.full(n, 0.02)]))
        # checker tiles of the palette
        tile = (np.floor((pts[:, 0] + 0.5) * 4) + np.floor((pts[:, 1] + 0.5) * 4)).astype(int) % len(pal)
        color = pal[tile] + rng.uniform(-0.05, 0.05, (n, 3))
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        rot[:, 3] = rng.uniform(-0.3, 0.3, n)
    elif comp.kind == "box":
        pos = center + rng.uniform(-0.5, 0.5, (n, 3)) * size
        edge = float(np.cbrt(np.prod(size) / n))
        log_scale = np.log(np.full((n, 3), 0.55 * edge)) + rng.uniform(-0.1, 0.1, (n, 3))
        color = pal[rng.integers(0, len(pal), n)] + rng.uniform(-0.05, 0.05, (n, 3))
        rot = _quat_random(rng, n)
    else:
        raise ConfigError(f"unknown background kind {comp.kind!r}")
    return GaussianCloud(torch.as_tensor(pos), log_scale, rot, np.full(n, 4.0), np.clip(color, 0, 1))


def _blob(comp: ForegroundComponent, rng) -> GaussianCloud:
    n = comp.count
    r = comp.radius
    member = 0.3 * r
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = (r - member) * np.cbrt(rng.uniform(0, 1, n))
    pos = dirs * rad[:, None]
    log_scale = np.log(np.full((n, 3), member)) + rng.uniform(-0.15, 0.0, (n, 3))
    color = np.clip(np.asarray(comp.color) + rng.uniform(-0.08, 0.08, (n, 3)), 0, 1)
    return GaussianCloud(torch.as_tensor(pos), log_scale, _quat_random(rng, n), np.full(n, 4.0), color)


def build_ground_truth(spec: SceneSpec) -> GroundTruth:
    if not spec.background and not spec.foreground:
        raise ConfigError("scene has no components")
    rng = np.random.default_rng(spec.seed)
    statics, comp_ids = [], []
    for i, comp in enumerate(spec.background):
        c = _background(comp, rng)
        statics.append(c)
        comp_ids.append(np.full(len(c), i))
    static = GaussianCloud.concat(statics) if statics else GaussianCloud.empty()
    fg = [_blob(c, rng) for c in spec.foreground]
    return GroundTruth(spec, static, np.concatenate(comp_ids) if comp_ids else np.zeros(0, int), fg)


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Snap to the 8-bit grid so PNG storage is lossless."""
    return torch.round(torch.clamp(img, 0.0, 1.0) * 255.0) / 255.0


def render_ground_truth(gt: GroundTruth, cameras: Sequence[Camera]) -> FrameSet:
    spec = gt.spec
    images = {}
    bg = torch.as_tensor(spec.background_color, dtype=torch.float64)
    for f in range(1, spec.frame_count + 1):
        cloud = gt.cloud_at(normalized_time(f, spec.frame_count))
        with torch.no_grad():
            for ci, cam in enumerate(cameras):
                out = rasterize(cloud.position, cloud.log_scale, cloud.rotation,
                                torch.sigmoid(cloud.opacity_logit), cloud.color, cam, background=bg)
                images[(ci, f)] = quantize(out.image)
    return FrameSet(list(cameras), images, spec.frame_count)


def generate_scene(spec: SceneSpec):
    """(ground truth, FrameSet, labels). Deterministic in ``spec.seed``.

    Dataset cameras come back with identity color tune; any perturbation used
    to render the images is recorded in ``labels['camera_gain'/'camera_bias']``.
    """
    gt = build_ground_truth(spec)
    rng = np.random.default_rng(spec.seed + 7919)
    cams = make_cameras(spec, rng)
    frames = render_ground_truth(gt, cams)
    labels = gt.labels()
    labels["camera_gain"] = np.stack([c.color_gain.numpy() for c in cams])
    labels["camera_bias"] = np.stack([c.color_bias.numpy() for c in cams])
    clean = make_cameras(spec)
    frames = FrameSet(clean, frames.images, frames.frame_count)
    return gt, frames, labels


def seed_points(gt: GroundTruth, jitter: float = 0.0, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Frame-1 Gaussian centers and colors, optionally jittered, as an SfM stand-in."""
    cloud = gt.cloud_at(0.0)
    pts = cloud.position.double().numpy().copy()
    if jitter:
        pts += np.random.default_rng(seed).normal(scale=jitter, size=pts.shape)
    return pts, cloud.color.double().numpy().copy()


def match_components(gt: GroundTruth, positions, t: float = 0.0) -> np.ndarray:
    """Component index of the nearest ground-truth Gaussian at time t."""
    ref = gt.cloud_at(t).position.double()
    comp = gt.labels()["component"]
    pos = torch.as_tensor(np.asarray(positions), dtype=torch.float64).reshape(-1, 3)
    if len(pos) == 0:
        return np.zeros(0, dtype=int)
    return comp[torch.cdist(pos, ref).argmin(dim=1).numpy()]


def dynamic_components(gt: GroundTruth) -> np.ndarray:
    nb = len(gt.spec.background)
    return np.array([nb + i for i, c in enumerate(gt.spec.foreground)
                     if c.trajectory.kind != "static" and c.trajectory.amplitude > 0], dtype=int)
