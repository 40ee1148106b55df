"""Pipeline configuration: every knob of the three stages with its default."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Tuple

from .optim import DensifyConfig, LRSchedule


@dataclass
class LearningRates:
    # position rates are multiplied by the scene extent
    position_bg: float = 2e-4
    position_bg_final: float = 1e-5
    position_fg: float = 1e-3
    position_fg_final: float = 5e-5
    scale: float = 5e-3
    rotation: float = 1e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    mask: float = 1e-2
    mask_beta2: float = 0.999
    gamma: float = 1e-3
    hexplane: float = 1.6e-3
    mlp: float = 1.6e-4
    camera_color: float = 1e-3

    def position(self, foreground: bool, total_steps: int) -> LRSchedule:
        if foreground:
            return LRSchedule(self.position_fg, self.position_fg_final, total_steps)
        return LRSchedule(self.position_bg, self.position_bg_final, total_steps)


@dataclass
class MotionConfig:
    levels: int = 2
    features: int = 16
    spatial_res: int = 32
    temporal_res: int = 16
    mlp_width: int = 64
    w_tv: float = 1e-4


@dataclass
class AblationConfig:
    relay: bool = True  # False: one global foreground set, no stage 2
    isolate_heads: bool = True  # False: background and foreground share heads
    gamma: bool = True  # False: plain mu + delta for every group
    pseudo_views: bool = True  # False: stage 2 supervises with the middle frame only


@dataclass
class PipelineConfig:
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"
    stage1_steps: int = 3000
    stage2_steps: int = 14000
    stage3_steps: int = 20000
    batch_size: int = 4
    k: int = 16
    p: int = 3
    eps: float = 0.01
    lam: float = 0.2
    ssim_window: int = 11
    mask_logit_init: float = 2.0
    opacity_init: float = 0.1
    gamma_init: float = 0.0
    background_color: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    test_cameras: Tuple[int, ...] = (7,)
    scene_extent: float = 0.0  # 0: derive from camera positions
    relay_blur_sigma: float = 0.0  # stage-2 coarse-to-fine blur, pixels at step 0
    relay_blur_fraction: float = 0.5
    stage3_densify: bool = True
    lr: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Tenth-length schedules for CPU-sized scenes.

        The mask learning rate is raised tenfold so a logit can still travel
        from its initial 2 to below logit(eps) within the shorter stage 1, and
        its Adam beta2 shortened so the step recovers once a moving Gaussian's
        opacity (and with it the mask gradient) has decayed. Densification
        thresholds are raised tenfold for the 64 px images. Stage 2 starts
        with an 8 px blur so relay copies can find a blob several of its
        radii away from where stage 1 left it.
        """
        cfg = cls(stage1_steps=300, stage2_steps=1400, stage3_steps=2000)
        cfg.lr.mask = 1e-1
        cfg.lr.mask_beta2 = 0.95
        cfg.densify.grad_threshold_bg = 2e-3
        cfg.densify.grad_threshold_fg = 1e-3
        cfg.relay_blur_sigma = 8.0
        return replace(cfg, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        nested = {"lr": LearningRates, "densify": DensifyConfig, "motion": MotionConfig,
                  "ablation": AblationConfig}
        kw = {}
        for name, f in cls.__dataclass_fields__.items():
            if name not in d:
                continue
            v = d[name]
            if name in nested:
                v = nested[name](**v)
            elif isinstance(v, list):
                v = tuple(v)
            kw[name] = v
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def replace(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Copy with overrides; dotted keys ("lr.mask") reach nested sections."""
    out = PipelineConfig.from_dict(cfg.to_dict())
    for key, val in overrides.items():
        target = out
        *path, leaf = key.replace("__", ".").split(".")
        for part in path:
            target = getattr(target, part)
        if not hasattr(target, leaf):
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, leaf, val)
    return out
