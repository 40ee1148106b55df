"""Optimization plumbing shared by the three stages."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import PipelineConfig
from .optim import (AdamState, DensifyConfig, GradStats, ParameterStore, adam_step,
                    densify_and_prune)
from .rasterizer import RenderOutput, render
from .scene import BACKGROUND, FOREGROUND, RELAY, Camera, FrameSet, GaussianCloud

log = logging.getLogger(__name__)

PARTS = (("bg", BACKGROUND), ("fg", FOREGROUND), ("relay", RELAY))
PART_GROUP = {"bg": "bg-gaussians", "fg": "fg-gaussians", "relay": "relay-gaussians"}
GEOMETRY = ("position", "log_scale", "rotation", "opacity_logit", "color")


def torch_dtype(name: str):
    return {"float32": torch.float32, "float64": torch.float64}[name]


def scene_extent(cameras: Sequence[Camera]) -> float:
    centers = np.stack([c.center for c in cameras])
    return float(1.1 * np.linalg.norm(centers - centers.mean(0), axis=1).max())


def split_parts(cloud: GaussianCloud) -> Dict[str, GaussianCloud]:
    return {name: cloud.select(cloud.group == g) for name, g in PARTS}


@dataclass
class Assembled:
    attrs: Dict[str, torch.Tensor]
    spans: List[Tuple[str, torch.Tensor, int]]  # (part, rows in part, offset in attrs)


class GaussianTrainer:
    """Owns the live parameters of a Gaussian cloud plus optional extras.

    ``trainable`` lists the parts (bg/fg/relay) whose attributes update;
    ``train_mask`` / ``train_gamma`` / ``train_camera`` switch the remaining
    groups on. ``motion`` is an nn.Module whose parameters join the store.
    """

    def __init__(self, cloud: GaussianCloud, frames: FrameSet, cfg: PipelineConfig, *,
                 total_steps: int, trainable: Sequence[str] = ("bg", "fg", "relay"),
                 densify: Sequence[str] = (), train_mask: bool = False, train_gamma: bool = False,
                 train_camera: bool = False, motion=None, extent: Optional[float] = None,
                 seed_offset: int = 0):
        self.cfg = cfg
        self.dtype = torch_dtype(cfg.dtype)
        self.frames = frames
        self.total_steps = total_steps
        self.trainable = tuple(trainable)
        self.densify_parts = tuple(densify)
        self.train_mask = train_mask
        self.train_gamma = train_gamma
        self.train_camera = train_camera
        self.motion = motion
        self.extent = extent if extent else (cfg.scene_extent or scene_extent(frames.cameras))
        self.rng = np.random.default_rng(cfg.seed * 1009 + seed_offset)
        self.gen = torch.Generator().manual_seed(cfg.seed * 7 + seed_offset)
        self.state = AdamState(group_beta2={"mask-logits": cfg.lr.mask_beta2})
        self.parts = {k: v.to(self.dtype) for k, v in split_parts(cloud).items()}
        self.store = ParameterStore()
        self.cameras = frames.cameras
        for i, cam in enumerate(self.cameras):
            cam.color_gain = cam.color_gain.detach().to(self.dtype)
            cam.color_bias = cam.color_bias.detach().to(self.dtype)
        self._register()
        if motion is not None:
            self.store.add_module("hexplane", motion.grid, "hexplane")
            self.store.add_module("mlp_bg", motion.heads_bg, "mlp-bg")
            self.store.add_module("mlp_fg", motion.heads_fg, "mlp-fg")
        self._targets: Dict[Tuple[int, int], torch.Tensor] = {}
        self._reset_stats()
        self.loss_curve: List[float] = []

    # registry ---------------------------------------------------------------
    def _register(self):
        for name, part in self.parts.items():
            grp = PART_GROUP[name]
            for attr in GEOMETRY:
                setattr(part, attr, self.store.add(f"{grp}.{attr}", getattr(part, attr), grp))
            part.mask_logit = self.store.add(f"mask-logits.{name}", part.mask_logit, "mask-logits")
            if name != "bg":
                part.gamma = self.store.add(f"gamma.{name}", part.gamma, "gamma")
        for i, cam in enumerate(self.cameras):
            cam.color_gain = self.store.add(f"camera-color.{i}.gain", cam.color_gain, "camera-color")
            cam.color_bias = self.store.add(f"camera-color.{i}.bias", cam.color_bias, "camera-color")

    def _reset_stats(self):
        self.stats = {k: GradStats.zeros(len(v)) for k, v in self.parts.items()}

    # rendering --------------------------------------------------------------
    def assemble(self, rows: Optional[Dict[str, torch.Tensor]] = None) -> Assembled:
        """Concatenate live attributes of the selected rows (all by default)."""
        cols = {k: [] for k in (*GEOMETRY, "mask_logit", "gamma", "group")}
        spans = []
        offset = 0
        for name, g in PARTS:
            part = self.parts[name]
            idx = torch.arange(len(part)) if rows is None or name not in rows else rows[name]
            if rows is not None and name not in rows:
                continue
            if len(idx) == 0:
                continue
            for attr in GEOMETRY + ("mask_logit",):
                cols[attr].append(getattr(part, attr)[idx])
            cols["gamma"].append(part.gamma[idx])
            cols["group"].append(torch.full((len(idx),), g, dtype=torch.int64))
            spans.append((name, idx, offset))
            offset += len(idx)
        if not spans:
            z = torch.zeros(0, dtype=self.dtype)
            attrs = {"position": z.reshape(0, 3), "log_scale": z.reshape(0, 3), "rotation": z.reshape(0, 4),
                     "opacity_logit": z, "color": z.reshape(0, 3), "mask_logit": z, "gamma": z.reshape(0, 3),
                     "group": torch.zeros(0, dtype=torch.int64)}
        else:
            attrs = {k: torch.cat(v) for k, v in cols.items()}
        attrs["sh"] = None
        return Assembled(attrs, spans)

    def target(self, cam: int, frame: int) -> torch.Tensor:
        key = (cam, frame)
        if key not in self._targets:
            self._targets[key] = self.frames.image(cam, frame).to(self.dtype)
        return self._targets[key]

    def render(self, asm: Assembled, cam: int, *, mask_mode="off", t=None, deformation=None) -> RenderOutput:
        bg = torch.as_tensor(self.cfg.background_color, dtype=self.dtype)
        return render(None, self.cameras[cam], params=asm.attrs, mask_mode=mask_mode, eps=self.cfg.eps,
                      t=t, deformation=deformation, background=bg, retain_mean2d=True)

    def record(self, out: RenderOutput, asm: Assembled, cam: int, scale: float) -> None:
        """Fold this view's screen-space gradients into the densify stats."""
        if out.mean2d is None or out.mean2d.grad is None:
            return
        c = self.cameras[cam]
        g = out.mean2d.grad.detach() * scale
        g = g * torch.tensor([0.5 * c.width, 0.5 * c.height], dtype=g.dtype)
        norms = g.norm(dim=-1)
        visible = torch.zeros(norms.shape[0], dtype=torch.bool)
        visible[out.visible] = True
        for name, idx, off in asm.spans:
            vis = visible[off:off + len(idx)]
            if name in self.densify_parts and bool(vis.any()):
                self.stats[name].add(idx[vis], norms[off:off + len(idx)][vis])

    # optimisation -------------------------------------------------------------
    def rates(self, step: int) -> Dict[str, object]:
        lr = self.cfg.lr
        out: Dict[str, object] = {}
        for name in self.trainable:
            if len(self.parts[name]) == 0:
                continue
            grp = PART_GROUP[name]
            out[f"{grp}.position"] = lr.position(name != "bg", self.total_steps)(step) * self.extent
            out[f"{grp}.log_scale"] = lr.scale
            out[f"{grp}.rotation"] = lr.rotation
            out[f"{grp}.opacity_logit"] = lr.opacity
            out[f"{grp}.color"] = lr.color
            if self.train_mask:
                out[f"mask-logits.{name}"] = lr.mask
            if self.train_gamma and name != "bg":
                out[f"gamma.{name}"] = lr.gamma
        if self.train_camera:
            for i in range(len(self.cameras)):
                out[f"camera-color.{i}.gain"] = lr.camera_color
                out[f"camera-color.{i}.bias"] = lr.camera_color
        if self.motion is not None:
            for k in self.store.names("hexplane"):
                out[k] = lr.hexplane
            for k in self.store.names("mlp-bg") + self.store.names("mlp-fg"):
                out[k] = lr.mlp
        return out

    def step(self, step: int) -> None:
        for name in self.densify_parts:
            p = self.parts[name].position
            if p.grad is not None and len(p):
                self.stats[name].direction += p.grad.detach().double()
        adam_step(self.store, self.state, self.rates(step))
        if self.densify_parts and self.cfg.densify.active(step, self.total_steps):
            self.densify()

    def densify(self) -> None:
        cfg: DensifyConfig = self.cfg.densify
        for name in self.densify_parts:
            part = self.parts[name]
            if len(part) == 0:
                continue
            st = self.stats[name]
            res = densify_and_prune(part, st.mean(), cfg, scene_extent=self.extent,
                                    directions=st.direction, generator=self.gen)
            self._replace(name, res.cloud, res.source, res.fresh)
            log.debug("densify %s: pruned %d cloned %d split %d -> %d", name, res.n_pruned,
                      res.n_cloned, res.n_split, len(res.cloud))
        self._reset_stats()

    def _replace(self, name: str, cloud: GaussianCloud, source, fresh) -> None:
        grp = PART_GROUP[name]
        cloud = cloud.to(self.dtype)
        keys = [f"{grp}.{a}" for a in GEOMETRY] + [f"mask-logits.{name}"]
        if name != "bg":
            keys.append(f"gamma.{name}")
        for key in keys:
            self.state.reindex(key, source, fresh)
        self.parts[name] = cloud
        for attr in GEOMETRY:
            setattr(cloud, attr, self.store.add(f"{grp}.{attr}", getattr(cloud, attr), grp))
        cloud.mask_logit = self.store.add(f"mask-logits.{name}", cloud.mask_logit, "mask-logits")
        if name != "bg":
            cloud.gamma = self.store.add(f"gamma.{name}", cloud.gamma, "gamma")

    def cloud(self) -> GaussianCloud:
        parts = [self.parts[n].to(torch.float64) for n, _ in PARTS]
        return GaussianCloud.concat(parts)

    def camera_colors(self) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        return [(c.color_gain.detach().double().clone(), c.color_bias.detach().double().clone())
                for c in self.cameras]


def detach_cameras(frames: FrameSet) -> None:
    for cam in frames.cameras:
        cam.color_gain = cam.color_gain.detach().double().clone()
        cam.color_bias = cam.color_bias.detach().double().clone()


def init_cloud_from_points(points, colors, *, opacity: float = 0.1, mask_logit: float = 2.0,
                           dtype=torch.float64) -> GaussianCloud:
    """3DGS-style initialization: isotropic scales from 3-NN distances."""
    pts = torch.as_tensor(points, dtype=torch.float64)
    n = pts.shape[0]
    if n > 1:
        d2 = torch.cdist(pts, pts).pow(2)
        d2.fill_diagonal_(float("inf"))
        k = min(3, n - 1)
        mean_d2 = torch.topk(d2, k, largest=False).values.mean(dim=-1).clamp(min=1e-7)
    else:
        mean_d2 = torch.full((n,), 1e-2, dtype=torch.float64)
    log_scale = torch.log(torch.sqrt(mean_d2))[:, None].repeat(1, 3)
    rot = torch.zeros(n, 4, dtype=torch.float64)
    rot[:, 0] = 1.0
    logit = math.log(opacity / (1.0 - opacity))
    return GaussianCloud(pts.to(dtype), log_scale, rot, torch.full((n,), logit),
                         torch.as_tensor(colors, dtype=torch.float64),
                         mask_logit=torch.full((n,), float(mask_logit)))
