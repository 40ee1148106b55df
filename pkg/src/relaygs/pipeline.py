"""Three-stage driver and rendering of a (partially) trained model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from .config import PipelineConfig
from .mask_stage import DecouplingReport, decouple, stage1_train
from .metrics import MetricReport
from .motion import MotionField, active_set, deform, scene_bounds, stage3_train
from .optim import AdamState
from .rasterizer import render
from .relay_stage import replicate_relay, stage2_train
from .scene import BACKGROUND, FOREGROUND, RELAY, Camera, ConfigError, FrameSet, GaussianCloud, segment_frames
from .training import init_cloud_from_points, torch_dtype

log = logging.getLogger(__name__)


@dataclass
class PipelineState:
    """Everything a later stage (or a renderer) needs from earlier ones.

    ``stage`` is the last completed stage (0 = initialized only).
    """

    cfg: PipelineConfig
    stage: int
    cloud: GaussianCloud
    frame_count: int
    camera_colors: List[Tuple[torch.Tensor, torch.Tensor]]
    motion: Optional[MotionField] = None
    optimizer: Optional[AdamState] = None
    losses: Dict[int, List[float]] = field(default_factory=dict)
    report: str = ""

    @property
    def segments(self):
        return segment_frames(self.frame_count, self.cfg.k, self.cfg.p)


def initial_state(points, colors, cfg: PipelineConfig, frame_count: int, n_cameras: int) -> PipelineState:
    cloud = init_cloud_from_points(points, colors, opacity=cfg.opacity_init, mask_logit=cfg.mask_logit_init)
    cams = [(torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)) for _ in range(n_cameras)]
    return PipelineState(cfg, 0, cloud, frame_count, cams)


def make_field(cfg: PipelineConfig, cloud: GaussianCloud) -> MotionField:
    m = cfg.motion
    return MotionField(scene_bounds(cloud.position), m.levels, m.features, m.spatial_res, m.temporal_res,
                       m.mlp_width, seed=cfg.seed, dtype=torch_dtype(cfg.dtype),
                       shared_heads=not cfg.ablation.isolate_heads, use_gamma=cfg.ablation.gamma)


def _apply_cameras(state: PipelineState, frames: FrameSet) -> None:
    if len(state.camera_colors) != len(frames.cameras):
        raise ConfigError("checkpoint and dataset disagree on the number of cameras")
    for cam, (gain, bias) in zip(frames.cameras, state.camera_colors):
        cam.color_gain = gain.detach().double().clone()
        cam.color_bias = bias.detach().double().clone()


def run_stage(state: PipelineState, frames: FrameSet, stage: int, *,
              callback: Optional[Callable[[int, float], None]] = None) -> PipelineState:
    """Run one stage on top of ``state`` (which must have finished stage - 1)."""
    if state.stage != stage - 1:
        raise ConfigError(f"stage {stage} needs a stage-{stage - 1} state, got stage {state.stage}")
    if frames.frame_count != state.frame_count:
        raise ConfigError("dataset frame count differs from the model's")
    cfg = state.cfg
    _apply_cameras(state, frames)
    segments = state.segments
    if stage == 1:
        res = stage1_train(state.cloud, frames, cfg, callback=callback)
        cloud, cams, trainer, losses = res.cloud, res.camera_colors, res.trainer, res.report.losses
        report = res.report.to_text()
    elif stage == 2:
        bg, fg = decouple(state.cloud, cfg.eps)
        report = DecouplingReport.of(state.cloud, cfg.eps).to_text()
        if cfg.ablation.relay and len(fg):
            res2 = stage2_train(bg, replicate_relay(fg, segments), frames, segments, cfg, callback=callback)
            cloud, trainer, losses = res2.cloud, res2.trainer, res2.losses
        else:
            cloud, trainer, losses = GaussianCloud.concat([bg, fg]), None, []
        cams = state.camera_colors
    elif stage == 3:
        fld = make_field(cfg, state.cloud)
        res3 = stage3_train(state.cloud, fld, frames, segments, cfg, callback=callback)
        cloud, trainer, losses = res3.cloud, res3.trainer, res3.losses
        cams = trainer.camera_colors()
        report = ""
    else:
        raise ConfigError(f"unknown stage {stage}")
    out = PipelineState(cfg, stage, cloud, state.frame_count,
                        [(g.clone(), b.clone()) for g, b in cams],
                        fld if stage == 3 else None,
                        trainer.state if trainer is not None else None,
                        {**state.losses, stage: list(losses)}, report)
    if out.motion is not None:
        out.motion = out.motion.double()
    return out


def run_pipeline(frames: FrameSet, cfg: PipelineConfig, points, colors, *, until: int = 3,
                 state: Optional[PipelineState] = None,
                 callback: Optional[Callable[[int, int, float], None]] = None) -> PipelineState:
    if state is None:
        state = initial_state(points, colors, cfg, frames.frame_count, len(frames.cameras))
    for stage in range(state.stage + 1, until + 1):
        cb = (lambda s, l, _st=stage: callback(_st, s, l)) if callback else None
        state = run_stage(state, frames, stage, callback=cb)
    return state


def camera_tune(state: PipelineState, cam_index: int):
    trained = [i for i in range(len(state.camera_colors)) if i not in state.cfg.test_cameras]
    if cam_index not in state.cfg.test_cameras or not trained:
        return state.camera_colors[cam_index]
    gain = torch.stack([state.camera_colors[i][0] for i in trained]).mean(0)
    bias = torch.stack([state.camera_colors[i][1] for i in trained]).mean(0)
    return gain, bias


def render_state(state: PipelineState, camera: Camera, t: float, *, cam_index: Optional[int] = None,
                 background=None) -> torch.Tensor:
    """Render the model at normalized time t (float64, no gradients).

    ``cam_index`` picks up that camera's learned color tune; a held-out
    camera, whose tune never trains, gets the mean tune of the training
    cameras. Without ``cam_index`` the camera's own gain/bias are used.
    """
    cfg = state.cfg
    cloud = state.cloud
    if cam_index is not None:
        gain, bias = camera_tune(state, cam_index)
        camera = Camera(camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height,
                        camera.rotation, camera.translation, gain, bias, camera.near)
    bg = torch.as_tensor(cfg.background_color if background is None else background, dtype=torch.float64)
    with torch.no_grad():
        if state.stage <= 1:
            from .scene import frame_at_time
            first = frame_at_time(t, state.frame_count) == 1
            out = render(cloud, camera, mask_mode="off" if first or state.stage == 0 else "apply",
                         eps=cfg.eps, background=bg)
            return out.image
        rows = active_set(cloud.group, cloud.segment, t, state.segments, state.frame_count)
        sub = cloud.select(rows)
        deformation = None
        if state.motion is not None:
            fld = state.motion.double()
            deformation = lambda attrs, tt: deform(attrs, tt, fld)
        return render(sub, camera, t=t, deformation=deformation, background=bg).image


def evaluate(state: PipelineState, frames: FrameSet, cameras: Optional[Sequence[int]] = None,
             frame_ids: Optional[Sequence[int]] = None) -> MetricReport:
    """PSNR/SSIM of renders against dataset images on held-out cameras."""
    cameras = state.cfg.test_cameras if cameras is None else cameras
    frame_ids = range(1, frames.frame_count + 1) if frame_ids is None else frame_ids
    pairs = {}
    for cam in cameras:
        for f in frame_ids:
            img = render_state(state, frames.cameras[cam], frames.normalized_time(f), cam_index=cam)
            pairs[f"cam{cam}/frame{f}"] = (img, frames.image(cam, f).double())
    return MetricReport.from_pairs(pairs, loss_curves={f"stage{k}": v for k, v in state.losses.items()})
