"""Domain types shared by every stage: Gaussians, cameras, frames, segments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

BACKGROUND = 0
FOREGROUND = 1
RELAY = 2
GROUP_NAMES = {BACKGROUND: "background", FOREGROUND: "foreground", RELAY: "relay"}

# degree-1 real spherical harmonic constant
SH_C1 = 0.4886025119029199


class InvalidRotationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) quaternions in (w, x, y, z) order to (..., 3, 3) rotations.

    Quaternions are renormalized first; a zero quaternion raises.
    """
    norm = q.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise InvalidRotationError("zero-norm quaternion")
    q = q / norm
    w, x, y, z = q.unbind(-1)
    rot = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return rot.reshape(*q.shape[:-1], 3, 3)


def covariance_from_params(log_scale: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """World-space covariance R S S^T R^T with S = diag(exp(log_scale)).

    Accepts single primitives (3,), (4,) or batches (N, 3), (N, 4).
    """
    log_scale = torch.as_tensor(log_scale)
    rotation = torch.as_tensor(rotation, dtype=log_scale.dtype)
    rot = quaternion_to_matrix(rotation)
    m = rot * torch.exp(log_scale).unsqueeze(-2)
    cov = m @ m.transpose(-1, -2)
    return 0.5 * (cov + cov.transpose(-1, -2))


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    mask_logit: float = 2.0
    gamma: Optional[np.ndarray] = None
    group: int = BACKGROUND
    segment: int = -1
    sh: Optional[np.ndarray] = None

    @property
    def opacity(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


# Per-row tensor attributes of a cloud, in checkpoint/export order.
FIELDS = ("position", "log_scale", "rotation", "opacity_logit", "color", "sh",
          "mask_logit", "gamma")


class GaussianCloud:
    """Struct-of-arrays Gaussian set.

    ``group`` holds BACKGROUND / FOREGROUND / RELAY per row and ``segment``
    the relay segment index (-1 elsewhere). ``gamma`` is stored for every
    row but only meaningful where group != BACKGROUND; background rows stay
    at zero.
    """

    def __init__(self, position, log_scale, rotation, opacity_logit, color,
                 mask_logit=None, gamma=None, group=None, segment=None, sh=None,
                 generation: int = 0):
        position = torch.as_tensor(position)
        dtype = position.dtype if position.is_floating_point() else torch.float64
        n = position.shape[0]
        as_t = lambda v: torch.as_tensor(v, dtype=dtype).clone()
        self.position = as_t(position).reshape(n, 3)
        self.log_scale = as_t(log_scale).reshape(n, 3)
        self.rotation = as_t(rotation).reshape(n, 4)
        self.opacity_logit = as_t(opacity_logit).reshape(n)
        self.color = as_t(color).reshape(n, 3)
        self.sh = as_t(sh).reshape(n, 3, 3) if sh is not None else torch.zeros(n, 3, 3, dtype=dtype)
        self.mask_logit = (as_t(mask_logit).reshape(n) if mask_logit is not None
                           else torch.full((n,), 2.0, dtype=dtype))
        self.gamma = as_t(gamma).reshape(n, 3) if gamma is not None else torch.zeros(n, 3, dtype=dtype)
        self.group = (torch.as_tensor(group, dtype=torch.int64).clone().reshape(n) if group is not None
                      else torch.zeros(n, dtype=torch.int64))
        self.segment = (torch.as_tensor(segment, dtype=torch.int64).clone().reshape(n) if segment is not None
                        else torch.full((n,), -1, dtype=torch.int64))
        self.generation = generation

    # construction helpers -------------------------------------------------
    @classmethod
    def empty(cls, dtype=torch.float64) -> "GaussianCloud":
        z = lambda *s: torch.zeros(*s, dtype=dtype)
        return cls(z(0, 3), z(0, 3), z(0, 4), z(0), z(0, 3))

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive], dtype=torch.float64) -> "GaussianCloud":
        if not prims:
            return cls.empty(dtype)
        col = lambda f: np.stack([np.asarray(getattr(p, f), dtype=np.float64) for p in prims])
        return cls(
            torch.as_tensor(col("position"), dtype=dtype),
            col("log_scale"), col("rotation"), col("opacity_logit"), col("color"),
            mask_logit=col("mask_logit"),
            gamma=np.stack([np.zeros(3) if p.gamma is None else np.asarray(p.gamma, float) for p in prims]),
            group=[p.group for p in prims],
            segment=[p.segment for p in prims],
            sh=np.stack([np.zeros((3, 3)) if p.sh is None else np.asarray(p.sh, float) for p in prims]),
        )

    @classmethod
    def concat(cls, clouds: Sequence["GaussianCloud"]) -> "GaussianCloud":
        clouds = [c for c in clouds if c is not None]
        kw = {f: torch.cat([getattr(c, f) for c in clouds]) for f in FIELDS}
        return cls(group=torch.cat([c.group for c in clouds]),
                   segment=torch.cat([c.segment for c in clouds]),
                   generation=max(c.generation for c in clouds), **kw)

    # access ---------------------------------------------------------------
    def __len__(self) -> int:
        return self.position.shape[0]

    @property
    def dtype(self):
        return self.position.dtype

    def __getitem__(self, i: int) -> GaussianPrimitive:
        g = int(self.group[i])
        return GaussianPrimitive(
            position=self.position[i].detach().numpy().copy(),
            log_scale=self.log_scale[i].detach().numpy().copy(),
            rotation=self.rotation[i].detach().numpy().copy(),
            opacity_logit=float(self.opacity_logit[i]),
            color=self.color[i].detach().numpy().copy(),
            mask_logit=float(self.mask_logit[i]),
            gamma=None if g == BACKGROUND else self.gamma[i].detach().numpy().copy(),
            group=g,
            segment=int(self.segment[i]),
            sh=self.sh[i].detach().numpy().copy(),
        )

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield self[i]

    def select(self, index) -> "GaussianCloud":
        """Rows picked by a boolean mask or an index tensor (copies)."""
        index = torch.as_tensor(index)
        kw = {f: getattr(self, f).detach()[index] for f in FIELDS}
        return GaussianCloud(group=self.group[index], segment=self.segment[index],
                             generation=self.generation, **kw)

    def clone(self) -> "GaussianCloud":
        return self.select(torch.arange(len(self)))

    def to(self, dtype) -> "GaussianCloud":
        c = self.clone()
        for f in FIELDS:
            setattr(c, f, getattr(c, f).to(dtype))
        return c

    def group_mask(self, group: int, segment: Optional[int] = None) -> torch.Tensor:
        m = self.group == group
        if segment is not None:
            m = m & (self.segment == segment)
        return m

    def counts(self) -> Dict[str, int]:
        return {name: int((self.group == g).sum()) for g, name in GROUP_NAMES.items()}

    def validate(self, n_segments: Optional[int] = None) -> None:
        if bool((self.rotation.norm(dim=-1) == 0).any()):
            raise InvalidRotationError("zero-norm quaternion in cloud")
        bg = self.group == BACKGROUND
        if bool((self.gamma[bg] != 0).any()):
            raise ValueError("background rows must not carry gamma")
        relay = self.group == RELAY
        if bool((self.segment[~relay] != -1).any()) or bool((self.segment[relay] < 0).any()):
            raise ValueError("segment tags inconsistent with groups")
        if n_segments is not None and bool((self.segment >= n_segments).any()):
            raise ValueError("relay row references a missing segment")


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world-to-camera
    translation: np.ndarray
    color_gain: torch.Tensor = None
    color_bias: torch.Tensor = None
    near: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-8):
            raise ConfigError("camera rotation is not orthonormal")
        if self.color_gain is None:
            self.color_gain = torch.ones(3, dtype=torch.float64)
        if self.color_bias is None:
            self.color_bias = torch.zeros(3, dtype=torch.float64)
        self.color_gain = torch.as_tensor(self.color_gain, dtype=torch.float64)
        self.color_bias = torch.as_tensor(self.color_bias, dtype=torch.float64)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width: int, height: int,
                focal: float) -> "Camera":
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in the image."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(focal, focal, width / 2.0, height / 2.0, width, height, rot, -rot @ eye)


@dataclass
class FrameSet:
    """Multi-view video. Frame indices are 1-based."""

    cameras: List[Camera]
    images: Dict[Tuple[int, int], torch.Tensor]
    frame_count: int

    def __post_init__(self):
        if self.frame_count < 1:
            raise ConfigError("frame set is empty")
        for (cam, frame), img in self.images.items():
            c = self.cameras[cam]
            if tuple(img.shape) != (c.height, c.width, 3):
                raise ValueError(f"image ({cam}, {frame}) has shape {tuple(img.shape)}")
            if not 1 <= frame <= self.frame_count:
                raise ValueError(f"frame index {frame} outside 1..{self.frame_count}")

    def normalized_time(self, frame: int) -> float:
        return normalized_time(frame, self.frame_count)

    def image(self, cam: int, frame: int) -> torch.Tensor:
        return self.images[(cam, frame)]


def normalized_time(frame: int, frame_count: int) -> float:
    if frame_count == 1:
        return 0.0
    return (frame - 1) / (frame_count - 1)


def frame_at_time(t: float, frame_count: int) -> int:
    return int(round(min(max(t, 0.0), 1.0) * (frame_count - 1))) + 1


@dataclass(frozen=True)
class TemporalSegment:
    index: int
    start: int
    end: int
    selected_frames: Tuple[int, ...] = field(default=())

    @property
    def frame_range(self) -> Tuple[int, int]:
        return (self.start, self.end)

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def __contains__(self, frame: int) -> bool:
        return self.start <= frame <= self.end


def select_frames(segment: TemporalSegment, p: int = 3) -> Tuple[int, ...]:
    """Evenly spaced supervision frames; for p=3 the first, floor-midpoint and last."""
    n = segment.length
    if n < p:
        return tuple(range(segment.start, segment.end + 1))
    if p == 1:
        return (segment.start + (n - 1) // 2,)
    picks = [segment.start + (i * (n - 1)) // (p - 1) for i in range(p)]
    return tuple(dict.fromkeys(picks))


def segment_frames(frame_count: int, k: int, p: int = 3) -> List[TemporalSegment]:
    """Tile frames 1..frame_count with consecutive segments of length k."""
    if k < 2:
        raise ConfigError(f"segment length k={k} must be at least 2")
    if frame_count < 1:
        raise ConfigError("frame_count must be positive")
    segs = []
    for i, start in enumerate(range(1, frame_count + 1, k)):
        seg = TemporalSegment(i, start, min(start + k - 1, frame_count))
        segs.append(TemporalSegment(seg.index, seg.start, seg.end, select_frames(seg, p)))
    return segs


def segment_of_frame(segments: Sequence[TemporalSegment], frame: int) -> TemporalSegment:
    for s in segments:
        if frame in s:
            return s
    raise ValueError(f"frame {frame} is not covered by any segment")
