"""HexPlane spatiotemporal encoding and the per-group deformation heads."""

from __future__ import annotations

import itertools
import logging
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene import BACKGROUND, FOREGROUND, RELAY, TemporalSegment, frame_at_time

log = logging.getLogger(__name__)

# (x, y, z, t) coordinate pairs of the six planes
PLANE_AXES = tuple(itertools.combinations(range(4), 2))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")


class HexPlaneGrid(nn.Module):
    """Six factorized feature planes per level, combined by elementwise product.

    ``bounds`` is a (2, 3) tensor [min, max] of the spatial box; time lives
    in [0, 1]. Level ``l`` has spatial resolution ``spatial_res * 2**l`` and
    temporal resolution ``temporal_res``.
    """

    def __init__(self, bounds, levels: int = 2, features: int = 16, spatial_res: int = 32,
                 temporal_res: int = 16, init_range=(0.1, 0.5), generator=None,
                 dtype=torch.float32):
        super().__init__()
        bounds = torch.as_tensor(bounds, dtype=torch.float64).reshape(2, 3)
        if bool((bounds[1] <= bounds[0]).any()):
            raise ValueError("grid bounds must have positive extent")
        self.register_buffer("bounds", bounds.to(dtype))
        self.levels = levels
        self.features = features
        self.resolutions: List[List[int]] = []
        self.planes = nn.ParameterList()
        for lvl in range(levels):
            res = [max(2, spatial_res * 2 ** lvl)] * 3 + [max(2, temporal_res)]
            self.resolutions.append(res)
            for a, b in PLANE_AXES:
                shape = (1, features, res[b], res[a])
                if b == 3:
                    plane = torch.ones(shape, dtype=dtype)
                else:
                    plane = torch.empty(shape, dtype=torch.float64).uniform_(*init_range, generator=generator).to(dtype)
                self.planes.append(nn.Parameter(plane))

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def plane(self, level: int, index: int) -> nn.Parameter:
        return self.planes[level * 6 + index]

    def normalize(self, position: torch.Tensor, t) -> torch.Tensor:
        lo, hi = self.bounds[0].to(position.dtype), self.bounds[1].to(position.dtype)
        xyz = (position - lo) / (hi - lo) * 2.0 - 1.0
        t = torch.as_tensor(t, dtype=position.dtype)
        tt = (t * 2.0 - 1.0).expand(position.shape[0]).reshape(-1, 1)
        return torch.clamp(torch.cat([xyz, tt], dim=-1), -1.0, 1.0)

    def forward(self, position: torch.Tensor, t) -> torch.Tensor:
        return hexplane_encode(position, t, self)


def hexplane_encode(position: torch.Tensor, t, grid: HexPlaneGrid) -> torch.Tensor:
    """(N, 3) positions at time t -> (N, levels * features) encodings."""
    position = position.reshape(-1, 3)
    coords = grid.normalize(position, t)
    n = coords.shape[0]
    outs = []
    for lvl in range(grid.levels):
        feat = None
        for i, (a, b) in enumerate(PLANE_AXES):
            plane = grid.plane(lvl, i)
            uv = coords[:, [a, b]].to(plane.dtype).reshape(1, n, 1, 2)
            val = F.grid_sample(plane, uv, mode="bilinear", padding_mode="border", align_corners=True)
            val = val.reshape(grid.features, n).T
            feat = val if feat is None else feat * val
        outs.append(feat)
    return torch.cat(outs, dim=-1)


def tv_loss(grid: HexPlaneGrid, weight: float = 1e-4) -> torch.Tensor:
    """weight * sum over planes of the mean squared difference of adjacent nodes."""
    total = 0.0
    for plane in grid.planes:
        dh = plane[..., :, 1:] - plane[..., :, :-1]
        dv = plane[..., 1:, :] - plane[..., :-1, :]
        total = total + (dh.pow(2).sum() + dv.pow(2).sum()) / (dh.numel() + dv.numel())
    return weight * total


class DeformationHeads(nn.Module):
    """Shared trunk plus position/rotation/scale/opacity delta heads."""

    OUT = {"position": 3, "rotation": 4, "scale": 3, "opacity": 1}

    def __init__(self, in_dim: int, width: int = 64, zero_init: bool = True, generator=None,
                 dtype=torch.float32):
        super().__init__()
        self.trunk = nn.Linear(in_dim, width)
        self.heads = nn.ModuleDict({k: nn.Linear(width, d) for k, d in self.OUT.items()})
        with torch.no_grad():
            for lin in [self.trunk, *self.heads.values()]:
                bound = 1.0 / lin.in_features ** 0.5
                lin.weight.copy_(torch.empty(lin.weight.shape, dtype=torch.float64).uniform_(-bound, bound, generator=generator))
                lin.bias.copy_(torch.empty(lin.bias.shape, dtype=torch.float64).uniform_(-bound, bound, generator=generator))
            if zero_init:
                for lin in self.heads.values():
                    lin.weight.zero_()
                    lin.bias.zero_()
        self.to(dtype)

    def forward(self, feature: torch.Tensor) -> Dict[str, torch.Tensor]:
        hidden = F.relu(self.trunk(feature))
        return {k: head(hidden) for k, head in self.heads.items()}


class MotionField(nn.Module):
    """Grid plus background and foreground head sets.

    ``shared_heads`` routes every group through the background heads and
    ``use_gamma=False`` drops the learnable displacement scale; both exist
    for ablations.
    """

    def __init__(self, bounds, levels=2, features=16, spatial_res=32, temporal_res=16, width=64,
                 seed: int = 0, dtype=torch.float32, shared_heads: bool = False, use_gamma: bool = True,
                 zero_init: bool = True):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.grid = HexPlaneGrid(bounds, levels, features, spatial_res, temporal_res, generator=gen, dtype=dtype)
        self.heads_bg = DeformationHeads(self.grid.out_dim, width, zero_init, gen, dtype)
        self.heads_fg = DeformationHeads(self.grid.out_dim, width, zero_init, gen, dtype)
        self.shared_heads = shared_heads
        self.use_gamma = use_gamma

    def deltas(self, position: torch.Tensor, t, group: torch.Tensor) -> Dict[str, torch.Tensor]:
        feat = hexplane_encode(position, t, self.grid).to(position.dtype)
        if self.shared_heads:
            return {k: v.to(position.dtype) for k, v in self.heads_bg(feat).items()}
        bg = group == BACKGROUND
        out_bg = self.heads_bg(feat)
        out_fg = self.heads_fg(feat)
        return {k: torch.where(bg[:, None], out_bg[k], out_fg[k]).to(position.dtype) for k in out_bg}

    def forward(self, attrs: Dict[str, torch.Tensor], t) -> Dict[str, torch.Tensor]:
        return deform(attrs, t, self)


def deform(attrs: Dict[str, torch.Tensor], t, field: MotionField,
           deltas: Optional[Dict[str, torch.Tensor]] = None) -> Dict[str, torch.Tensor]:
    """Deformed copy of ``attrs`` at time ``t``.

    Background rows move by the raw position delta; foreground and relay
    rows by (1 + exp(gamma)) * delta per axis. Scale deltas act on the log
    scale, opacity deltas on the opacity logit, rotation deltas are added to
    the quaternion before renormalization. Color is left alone.
    """
    mu = attrs["position"]
    group = attrs["group"]
    if deltas is None:
        deltas = field.deltas(mu, t, group)
    for k, v in deltas.items():
        if not bool(torch.isfinite(v).all()):
            raise FloatingPointError(f"non-finite {k} deformation")
    d_mu = deltas["position"]
    if field.use_gamma:
        fg = (group != BACKGROUND)[:, None]
        scale = torch.where(fg, 1.0 + torch.exp(attrs["gamma"]), torch.ones_like(d_mu))
        d_mu = scale * d_mu
    q = attrs["rotation"] + deltas["rotation"]
    out = dict(attrs)
    out["position"] = mu + d_mu
    out["log_scale"] = attrs["log_scale"] + deltas["scale"]
    out["rotation"] = q / q.norm(dim=-1, keepdim=True)
    out["opacity_logit"] = attrs["opacity_logit"] + deltas["opacity"].reshape(-1)
    return out


def active_set(group: torch.Tensor, segment: torch.Tensor, t: float,
               segments: Sequence[TemporalSegment], frame_count: int) -> torch.Tensor:
    """Rows rendered at time t: background, unreplicated foreground, and the
    relay copies of the segment containing t."""
    if not 0.0 <= t <= 1.0:
        log.warning("time %s outside [0, 1]; clamped", t)
        t = min(max(t, 0.0), 1.0)
    frame = frame_at_time(t, frame_count)
    seg = next(s.index for s in segments if frame in s)
    return (group == BACKGROUND) | (group == FOREGROUND) | ((group == RELAY) & (segment == seg))


def scene_bounds(position: torch.Tensor, pad: float = 0.1) -> torch.Tensor:
    """Axis-aligned box around ``position`` grown by ``pad`` of its size per side."""
    p = position.detach().double().reshape(-1, 3)
    if len(p) == 0:
        return torch.tensor([[-1.0] * 3, [1.0] * 3], dtype=torch.float64)
    lo, hi = p.min(0).values, p.max(0).values
    size = (hi - lo).clamp(min=1e-3)
    return torch.stack([lo - pad * size, hi + pad * size])


class Stage3Result:
    def __init__(self, cloud, field, losses, trainer):
        self.cloud = cloud
        self.field = field
        self.losses = losses
        self.trainer = trainer


def stage3_train(cloud, field: MotionField, frames, segments: Sequence[TemporalSegment], cfg, *,
                 steps: Optional[int] = None, callback=None) -> Stage3Result:
    """Joint fit of canonical Gaussians, grid, heads, gamma and camera color
    under L1 plus grid total variation."""
    from .mask_stage import training_pairs
    from .metrics import l1_loss
    from .training import GaussianTrainer

    steps = cfg.stage3_steps if steps is None else steps
    densify = ("bg", "fg", "relay") if cfg.stage3_densify else ()
    trainer = GaussianTrainer(cloud, frames, cfg, total_steps=steps, densify=densify, train_gamma=True,
                              train_camera=True, motion=field, seed_offset=3)
    pairs = training_pairs(frames, cfg.test_cameras)
    batch = cfg.batch_size
    deformation = lambda attrs, t: deform(attrs, t, field)
    losses = []
    for step in range(steps):
        total = 0.0
        for j in trainer.rng.integers(0, len(pairs), size=batch):
            cam, frame = pairs[int(j)]
            t = frames.normalized_time(frame)
            seg = next(s.index for s in segments if frame in s)
            relay = trainer.parts["relay"]
            rows = {"bg": torch.arange(len(trainer.parts["bg"])), "fg": torch.arange(len(trainer.parts["fg"])),
                    "relay": torch.nonzero(relay.segment == seg).squeeze(-1)}
            asm = trainer.assemble(rows)
            out = trainer.render(asm, cam, t=t, deformation=deformation)
            loss = l1_loss(out.image, trainer.target(cam, frame)) / batch
            loss.backward()
            trainer.record(out, asm, cam, batch)
            total += float(loss.detach())
        reg = tv_loss(field.grid, cfg.motion.w_tv)
        reg.backward()
        total += float(reg.detach())
        losses.append(total)
        trainer.step(step)
        if callback is not None:
            callback(step, total)
    return Stage3Result(trainer.cloud(), field, losses, trainer)
