"""Finite-difference audit of every trainable parameter class on tiny scenes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np
import torch

from .metrics import photometric_loss
from .motion import MotionField, deform
from .optim import ParameterStore, finite_diff_check
from .rasterizer import render
from .scene import BACKGROUND, FOREGROUND, RELAY, Camera

PARAMS_PER_CLASS = 6
# keeps every composited pixel away from the [0, 1] clamp of the color tune
GREY = (0.35, 0.4, 0.45)


@dataclass
class GradCheckCase:
    seed: int
    max_rel_error: float
    per_class: Dict[str, float]
    worst: tuple


def _tiny_scene(seed: int, n: int = 8, size: int = 32):
    """n Gaussians in front of one camera, kept clear of every clamp:
    alphas well below the cap, transmittance above the cutoff, distinct
    depths and footprints inside the frame."""
    rng = np.random.default_rng(seed)
    cam = Camera.look_at((0.0, -4.0, 1.0), (0.0, 0.0, 0.5), width=size, height=size, focal=size * 0.9)
    pos = np.column_stack([rng.uniform(-0.8, 0.8, n), np.linspace(-0.9, 0.9, n) + rng.uniform(-0.05, 0.05, n),
                           rng.uniform(0.1, 0.9, n)])
    log_scale = np.log(rng.uniform(0.12, 0.3, (n, 3)))
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    opacity = rng.uniform(0.25, 0.6, n)
    color = rng.uniform(0.15, 0.75, (n, 3))
    sh = rng.normal(scale=0.05, size=(n, 3, 3))
    mask_logit = rng.choice([-6.0, 2.0], n) + rng.normal(scale=0.5, size=n)
    gamma = rng.normal(scale=0.3, size=(n, 3))
    group = rng.choice([BACKGROUND, FOREGROUND, RELAY], n)
    gamma[group == BACKGROUND] = 0.0
    # black/white target: the render stays inside (0, 1), so the L1 kink is never crossed
    target = torch.from_numpy(rng.choice([0.0, 1.0], (size, size, 3)))
    t = float(rng.uniform(0.1, 0.9))
    f64 = lambda a: torch.as_tensor(a, dtype=torch.float64)
    params = {"position": f64(pos), "log_scale": f64(log_scale), "rotation": f64(rot),
              "opacity_logit": f64(np.log(opacity / (1 - opacity))), "color": f64(color), "sh": f64(sh),
              "mask_logit": f64(mask_logit), "gamma": f64(gamma)}
    return cam, params, torch.as_tensor(group), target, t


def check_seed(seed: int, h: float = 1e-4, size: int = 32, n: int = 8, eps: float = 0.01,
               lam: float = 0.2, per_class: int = PARAMS_PER_CLASS) -> GradCheckCase:
    """Compare analytic and central-difference gradients of the stage-1 loss
    (with deformation and masking switched on) for one seeded scene."""
    cam, params, group, target, t = _tiny_scene(seed, n, size)
    bounds = torch.tensor([[-1.2, -1.2, -0.2], [1.2, 1.2, 1.2]], dtype=torch.float64)
    field = MotionField(bounds, levels=1, features=2, spatial_res=4, temporal_res=3, width=8, seed=seed,
                        dtype=torch.float64, zero_init=False)
    with torch.no_grad():
        for p in field.grid.planes:
            p.add_(torch.empty_like(p).uniform_(-0.2, 0.2, generator=torch.Generator().manual_seed(seed)))
    store = ParameterStore()
    for k, v in params.items():
        grp = "mask-logits" if k == "mask_logit" else "gamma" if k == "gamma" else "fg-gaussians"
        params[k] = store.add(k, v, grp)
    store.add_module("hexplane", field.grid, "hexplane")
    store.add_module("mlp_fg", field.heads_fg, "mlp-fg")
    store.add_module("mlp_bg", field.heads_bg, "mlp-bg")
    cam.color_gain = store.add("camera.gain", torch.tensor([0.95, 1.0, 1.05], dtype=torch.float64), "camera-color")
    cam.color_bias = store.add("camera.bias", torch.tensor([0.01, -0.01, 0.0], dtype=torch.float64), "camera-color")

    # the mask forward value is frozen at its starting point so that finite
    # differences see the straight-through surrogate hard(m0) - s(m0) + s(m)
    m0 = params["mask_logit"].detach().clone()
    hard0 = (torch.sigmoid(m0) > eps).to(torch.float64)

    def loss_fn():
        m = store["mask_logit"]
        mask = hard0 - torch.sigmoid(m0) + torch.sigmoid(m)
        attrs = {k: store[k] for k in params}
        attrs["group"] = group
        out = render(None, cam, t=t, deformation=lambda a, tt: deform(a, tt, field), params=attrs,
                     mask_mode="apply", eps=eps, mask_value=mask, background=GREY)
        return photometric_loss(out.image, target, lam)

    rng = np.random.default_rng(seed + 1)
    indices = {}
    classes: Dict[str, List[str]] = {}
    for name in store:
        numel = store[name].numel()
        indices[name] = rng.choice(numel, size=min(per_class, numel), replace=False)
        cls = name.split(".")[0]
        if cls.startswith("mlp"):
            cls = "mlp"
        classes.setdefault(cls, []).append(name)
    res = finite_diff_check(loss_fn, store, h=h, indices=indices)
    per = {cls: max(res.per_param[n] for n in names) for cls, names in classes.items()}
    return GradCheckCase(seed, res.max_rel_error, per, res.worst)


def run_suite(seeds=range(20), **kw) -> List[GradCheckCase]:
    return [check_seed(int(s), **kw) for s in seeds]
