"""Stage 1: static fit over all frames with a learnable binary mask, then the
background/foreground split."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .metrics import photometric_loss
from .scene import BACKGROUND, FOREGROUND, ConfigError, FrameSet, GaussianCloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskConfig:
    eps: float = 0.01
    mask_logit_init: float = 2.0
    stage1_steps: int = 3000

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ConfigError(f"mask threshold eps={self.eps} must lie in (0, 1)")


@dataclass(frozen=True)
class StageLossConfig:
    lam: float = 0.2
    ssim_window: int = 11

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"D-SSIM weight {self.lam} must lie in [0, 1]")

    def __call__(self, render: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return photometric_loss(render, target, self.lam, window=self.ssim_window)


def binary_mask(mask_logit: torch.Tensor, eps: float = 0.01) -> torch.Tensor:
    """Hard 0/1 gate in the forward pass, gradient of sigmoid(m) in the backward."""
    s = torch.sigmoid(mask_logit)
    hard = (s > eps).to(s.dtype)
    return (hard - s).detach() + s


def masked_opacity(opacity: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return mask * opacity


def mask_values(mask_logit: torch.Tensor, eps: float = 0.01) -> torch.Tensor:
    """Forward-only 0/1 mask as a bool tensor."""
    return torch.sigmoid(mask_logit.detach()) > eps


def decouple(cloud: GaussianCloud, eps: float = 0.01) -> Tuple[GaussianCloud, GaussianCloud]:
    """(background with M=1, foreground with M=0); foreground gets a zero gamma."""
    keep = mask_values(cloud.mask_logit, eps)
    background = cloud.select(keep)
    background.group[:] = BACKGROUND
    background.segment[:] = -1
    background.gamma.zero_()
    foreground = cloud.select(~keep)
    foreground.group[:] = FOREGROUND
    foreground.segment[:] = -1
    foreground.gamma.zero_()
    if len(foreground) == 0:
        warnings.warn("no Gaussian ended with mask 0; the foreground is empty", RuntimeWarning)
    return background, foreground


@dataclass
class DecouplingReport:
    n_total: int
    n_background: int
    n_foreground: int
    histogram: List[int]  # counts of sigmoid(mask_logit) over 10 equal bins in [0, 1]
    eps: float
    losses: List[float] = field(default_factory=list)

    @classmethod
    def of(cls, cloud: GaussianCloud, eps: float, losses=()) -> "DecouplingReport":
        m = mask_values(cloud.mask_logit, eps)
        s = torch.sigmoid(cloud.mask_logit.detach()).double().numpy()
        hist, _ = np.histogram(s, bins=10, range=(0.0, 1.0))
        return cls(len(cloud), int(m.sum()), int((~m).sum()), hist.tolist(), eps, list(losses))

    def to_text(self) -> str:
        lines = [f"total = {self.n_total}", f"background = {self.n_background}",
                 f"foreground = {self.n_foreground}", f"eps = {self.eps}",
                 "mask_histogram = " + " ".join(str(h) for h in self.histogram)]
        if self.losses:
            lines.append(f"final_loss = {self.losses[-1]:.6f}")
        return "\n".join(lines) + "\n"


@dataclass
class Stage1Result:
    cloud: GaussianCloud
    report: DecouplingReport
    camera_colors: List[Tuple[torch.Tensor, torch.Tensor]]
    trainer: object = None


def training_pairs(frames: FrameSet, test_cameras=()) -> List[Tuple[int, int]]:
    pairs = sorted(k for k in frames.images if k[0] not in set(test_cameras))
    if not pairs:
        raise ConfigError("no training images")
    return pairs


def stage1_train(cloud: GaussianCloud, frames: FrameSet, cfg, *, steps: Optional[int] = None,
                 callback: Optional[Callable[[int, float], None]] = None) -> Stage1Result:
    """Fit a static cloud to every frame; frame 1 ignores the mask, later
    frames render with it applied."""
    from .training import GaussianTrainer

    if not frames.images:
        raise ConfigError("stage 1 needs at least one frame")
    steps = cfg.stage1_steps if steps is None else steps
    loss_fn = StageLossConfig(cfg.lam, cfg.ssim_window)
    MaskConfig(cfg.eps, cfg.mask_logit_init, steps)
    start = cloud.clone()
    start.group[:] = BACKGROUND
    start.segment[:] = -1
    trainer = GaussianTrainer(start, frames, cfg, total_steps=steps, trainable=("bg",), densify=("bg",),
                              train_mask=True, train_camera=True, seed_offset=1)
    pairs = training_pairs(frames, cfg.test_cameras)
    batch = cfg.batch_size
    losses = []
    for step in range(steps):
        total = 0.0
        picks = trainer.rng.integers(0, len(pairs), size=batch)
        for j in picks:
            cam, frame = pairs[int(j)]
            asm = trainer.assemble()
            out = trainer.render(asm, cam, mask_mode="off" if frame == 1 else "apply")
            loss = loss_fn(out.image, trainer.target(cam, frame)) / batch
            loss.backward()
            trainer.record(out, asm, cam, batch)
            total += float(loss.detach())
        losses.append(total)
        trainer.step(step)
        if callback is not None:
            callback(step, total)
    result = trainer.cloud()
    return Stage1Result(result, DecouplingReport.of(result, cfg.eps, losses), trainer.camera_colors(), trainer)
