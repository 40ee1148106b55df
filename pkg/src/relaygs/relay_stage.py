"""Stage 2: per-segment copies of the foreground trained against blended
pseudo-views, with the background held fixed."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .mask_stage import StageLossConfig, training_pairs
from .scene import RELAY, ConfigError, FrameSet, GaussianCloud, TemporalSegment

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-9


def replicate_relay(foreground: GaussianCloud, segments: Sequence[TemporalSegment]) -> GaussianCloud:
    """One deep copy of the foreground per segment, tagged with its segment index."""
    if not segments:
        raise ConfigError("relay replication needs at least one segment")
    if len(foreground) == 0:
        warnings.warn("empty foreground; no relay Gaussians created", RuntimeWarning)
    copies = []
    for seg in segments:
        c = foreground.clone()
        c.group[:] = RELAY
        c.segment[:] = seg.index
        copies.append(c)
    return GaussianCloud.concat(copies)


def check_weights(weights) -> torch.Tensor:
    w = torch.as_tensor(weights, dtype=torch.float64).reshape(-1)
    if abs(float(w.sum()) - 1.0) > WEIGHT_TOL:
        raise ConfigError(f"blending weights sum to {float(w.sum())!r}, not 1")
    return w


def build_pseudo_view(images: Sequence[torch.Tensor], weights=None) -> torch.Tensor:
    """Pixel-wise convex blend of same-sized images (uniform by default)."""
    if not images:
        raise ConfigError("pseudo-view needs at least one image")
    shape = tuple(images[0].shape)
    if any(tuple(im.shape) != shape for im in images):
        raise ConfigError("pseudo-view images differ in resolution")
    if weights is None:
        if all(torch.equal(images[0], im) for im in images[1:]):
            return images[0].clone()
        weights = [1.0 / len(images)] * len(images)
    w = check_weights(weights)
    if len(w) != len(images):
        raise ConfigError(f"{len(w)} weights for {len(images)} images")
    out = torch.zeros_like(images[0])
    for wi, im in zip(w.tolist(), images):
        out = out + wi * im
    return out


@dataclass
class PseudoView:
    camera_id: int
    segment: int
    image: torch.Tensor
    frames: Tuple[int, ...]
    weights: Tuple[float, ...]


def pseudo_views(frames: FrameSet, segments: Sequence[TemporalSegment], cameras: Sequence[int],
                 weights=None, middle_only: bool = False) -> Dict[Tuple[int, int], PseudoView]:
    """Pseudo-view per (camera, segment). ``middle_only`` keeps the middle
    selected frame alone (ablation)."""
    out = {}
    for seg in segments:
        sel = tuple(seg.selected_frames)
        if middle_only:
            sel = (sel[len(sel) // 2],)
        w = weights if weights is not None and not middle_only else [1.0 / len(sel)] * len(sel)
        w = tuple(check_weights(w).tolist())
        for cam in cameras:
            img = build_pseudo_view([frames.image(cam, f) for f in sel], w)
            out[(cam, seg.index)] = PseudoView(cam, seg.index, img, sel, w)
    return out


def blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of an H x W x C image (identity for sigma <= 0)."""
    if sigma <= 0:
        return image
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=image.dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    img = image.permute(2, 0, 1).unsqueeze(1)  # C x 1 x H x W
    img = F.conv2d(F.pad(img, (radius, radius, 0, 0), mode="replicate"), k.reshape(1, 1, 1, -1))
    img = F.conv2d(F.pad(img, (0, 0, radius, radius), mode="replicate"), k.reshape(1, 1, -1, 1))
    return img.squeeze(1).permute(1, 2, 0)


@dataclass(frozen=True)
class ReachSchedule:
    """Coarse-to-fine blur of render and target, in pixels.

    Starts at ``sigma`` and decays linearly to zero at ``fraction`` of the
    stage; afterwards the loss is the unblurred photometric loss.
    """

    sigma: float = 0.0
    fraction: float = 0.5

    def __call__(self, step: int, total: int) -> float:
        if self.sigma <= 0 or total <= 0:
            return 0.0
        s = step / (self.fraction * total)
        return max(0.0, self.sigma * (1.0 - s))


@dataclass
class Stage2Result:
    cloud: GaussianCloud
    views: Dict[Tuple[int, int], PseudoView]
    losses: List[float] = field(default_factory=list)
    trainer: object = None


def stage2_train(background: GaussianCloud, relay: GaussianCloud, frames: FrameSet,
                 segments: Sequence[TemporalSegment], cfg, *, steps: Optional[int] = None,
                 views: Optional[Dict[Tuple[int, int], PseudoView]] = None,
                 callback: Optional[Callable[[int, float], None]] = None) -> Stage2Result:
    """Optimize relay copies against per-segment pseudo-views; background frozen."""
    from .training import GaussianTrainer

    steps = cfg.stage2_steps if steps is None else steps
    cloud = GaussianCloud.concat([background, relay])
    cams = sorted({c for c, _ in training_pairs(frames, cfg.test_cameras)})
    if views is None:
        views = pseudo_views(frames, segments, cams, middle_only=not cfg.ablation.pseudo_views)
    if len(relay) == 0 or steps <= 0:
        return Stage2Result(cloud, views)
    loss_fn = StageLossConfig(cfg.lam, cfg.ssim_window)
    reach = ReachSchedule(cfg.relay_blur_sigma, cfg.relay_blur_fraction)
    trainer = GaussianTrainer(cloud, frames, cfg, total_steps=steps, trainable=("relay",), densify=("relay",),
                              seed_offset=2)
    pairs = [(c, s.index) for c in cams for s in segments]
    batch = cfg.batch_size
    losses = []
    for step in range(steps):
        sigma = reach(step, steps)
        total = 0.0
        for j in trainer.rng.integers(0, len(pairs), size=batch):
            cam, seg = pairs[int(j)]
            view = views.get((cam, seg))
            if view is None:
                raise RuntimeError(f"missing pseudo-view for camera {cam}, segment {seg}")
            part = trainer.parts["relay"]
            rows = {"bg": torch.arange(len(trainer.parts["bg"])),
                    "relay": torch.nonzero(part.segment == seg).squeeze(-1)}
            asm = trainer.assemble(rows)
            out = trainer.render(asm, cam)
            target = view.image.to(trainer.dtype)
            loss = loss_fn(blur(out.image, sigma), blur(target, sigma)) / batch
            loss.backward()
            trainer.record(out, asm, cam, batch)
            total += float(loss.detach())
        losses.append(total)
        trainer.step(step)
        if callback is not None:
            callback(step, total)
    return Stage2Result(trainer.cloud(), views, losses, trainer)
