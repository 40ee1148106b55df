"""Dense differentiable splatting: project, sort, composite.

Every Gaussian that survives culling is evaluated at every pixel; the whole
image is composited with one global front-to-back depth order (no tiles).
Projection and covariance math run through torch autograd; the per-pixel
compositing core has a hand-written backward in ``_composite``.
:func:`render_backward` exposes the resulting gradients by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import torch

from ._composite import ALPHA_MAX, T_MIN, composite
from .scene import SH_C1, Camera, GaussianCloud, covariance_from_params

# 2D dilation added to every projected covariance (eigenvalue floor, px^2).
COV2D_FLOOR = 0.3
CULL_SIGMA = 3.0


@dataclass
class SplattedGaussian:
    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    color: torch.Tensor
    alpha_base: torch.Tensor


@dataclass
class RenderOutput:
    image: torch.Tensor  # H x W x 3, after the camera color tune
    transmittance: torch.Tensor  # H x W
    raw_image: torch.Tensor  # before the color tune
    visible: torch.Tensor  # indices into the rendered attribute rows
    mean2d: Optional[torch.Tensor] = None  # retained for densification stats
    inputs: Dict[str, torch.Tensor] = field(default_factory=dict)


def camera_tensors(camera: Camera, dtype):
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    trans = torch.as_tensor(camera.translation, dtype=dtype)
    return rot, trans


def project_means(means: torch.Tensor, camera: Camera):
    rot, trans = camera_tensors(camera, means.dtype)
    p = means @ rot.T + trans
    z = p[:, 2]
    u = camera.fx * p[:, 0] / z + camera.cx
    v = camera.fy * p[:, 1] / z + camera.cy
    return torch.stack([u, v], dim=-1), p


def project_covariance(cov3d: torch.Tensor, p_cam: torch.Tensor, camera: Camera) -> torch.Tensor:
    """EWA linearization J W Sigma W^T J^T (no dilation)."""
    rot, _ = camera_tensors(camera, cov3d.dtype)
    x, y, z = p_cam.unbind(-1)
    zero = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([camera.fx / z, zero, -camera.fx * x / (z * z)], -1),
            torch.stack([zero, camera.fy / z, -camera.fy * y / (z * z)], -1),
        ],
        dim=-2,
    )
    t = jac @ rot
    cov = t @ cov3d @ t.transpose(-1, -2)
    return 0.5 * (cov + cov.transpose(-1, -2))


def _cull(mean2d, cov2d, depth, camera: Camera) -> torch.Tensor:
    with torch.no_grad():
        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - (a * c - b * b), min=0.0))
        r = CULL_SIGMA * torch.sqrt(lam)
        u, v = mean2d[:, 0], mean2d[:, 1]
        keep = depth > camera.near
        keep &= (u + r > 0) & (u - r < camera.width) & (v + r > 0) & (v - r < camera.height)
        keep &= torch.isfinite(u) & torch.isfinite(v)
    return keep


def project_gaussian(primitive, camera: Camera) -> Optional[SplattedGaussian]:
    """Single-primitive projection; returns None when culled."""
    cloud = GaussianCloud.from_primitives([primitive])
    means = cloud.position
    mean2d, p_cam = project_means(means, camera)
    depth = p_cam[:, 2]
    if not bool(depth[0] > camera.near):
        return None
    cov3d = covariance_from_params(cloud.log_scale, cloud.rotation)
    cov2d = project_covariance(cov3d, p_cam, camera) + COV2D_FLOOR * torch.eye(2, dtype=means.dtype)
    if not bool(_cull(mean2d, cov2d, depth, camera)[0]):
        return None
    color = view_color(cloud.color, cloud.sh, means, camera)
    alpha = torch.sigmoid(cloud.opacity_logit)
    return SplattedGaussian(mean2d[0], cov2d[0], depth[0], color[0], alpha[0])


def gaussian_weight(pixel, splat: SplattedGaussian) -> torch.Tensor:
    cov = torch.as_tensor(splat.cov2d)
    det = torch.det(cov)
    if not bool(det > 0):
        raise RuntimeError("singular 2D covariance after flooring")
    d = torch.as_tensor(pixel, dtype=cov.dtype) - torch.as_tensor(splat.mean2d, dtype=cov.dtype)
    return torch.exp(-0.5 * d @ torch.linalg.solve(cov, d))


def composite_pixel(contributions: Sequence, background=(0.0, 0.0, 0.0)) -> torch.Tensor:
    """Front-to-back compositing of (color, alpha) pairs for one pixel."""
    out = torch.zeros(3, dtype=torch.float64)
    trans = 1.0
    for color, alpha in contributions:
        alpha = min(float(alpha), ALPHA_MAX)
        if trans < T_MIN:
            break
        out = out + torch.as_tensor(color, dtype=torch.float64) * alpha * trans
        trans *= 1.0 - alpha
    return out + trans * torch.as_tensor(background, dtype=torch.float64)


def view_color(color: torch.Tensor, sh: torch.Tensor, means: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Base RGB plus the degree-1 harmonic term along the camera-to-mean ray."""
    if sh is None or not sh.requires_grad and not bool(sh.any()):
        return color
    center = torch.as_tensor(camera.center, dtype=means.dtype)
    d = means - center
    d = d / d.norm(dim=-1, keepdim=True)
    x, y, z = d.unbind(-1)
    return color + SH_C1 * (-y[:, None] * sh[:, 0] + z[:, None] * sh[:, 1] - x[:, None] * sh[:, 2])


def pixel_grid(camera: Camera, dtype) -> torch.Tensor:
    ys = torch.arange(camera.height, dtype=dtype) + 0.5
    xs = torch.arange(camera.width, dtype=dtype) + 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def rasterize(means, log_scales, rotations, opacity, colors, camera: Camera, *,
              sh=None, background=None, color_tune: bool = True,
              retain_mean2d: bool = False) -> RenderOutput:
    """Render activated attributes.

    ``opacity`` is the effective per-Gaussian opacity in (0, 1), i.e. already
    multiplied by the binary mask when masking is on.
    """
    dtype = means.dtype
    h, w = camera.height, camera.width
    bg = torch.zeros(3, dtype=dtype) if background is None else torch.as_tensor(background, dtype=dtype)

    n = means.shape[0]
    if n:
        mean2d, p_cam = project_means(means, camera)
        depth = p_cam[:, 2]
        cov3d = covariance_from_params(log_scales, rotations)
        cov2d = project_covariance(cov3d, p_cam, camera) + COV2D_FLOOR * torch.eye(2, dtype=dtype)
        keep = _cull(mean2d, cov2d, depth, camera)
        visible = torch.nonzero(keep).squeeze(-1)
    else:
        visible = torch.zeros(0, dtype=torch.int64)
        mean2d = means.new_zeros(0, 2)

    if retain_mean2d and mean2d.requires_grad:
        mean2d.retain_grad()

    if visible.numel() == 0:
        raw = bg.expand(h, w, 3).clone()
        trans = torch.ones(h, w, dtype=dtype)
    else:
        order = visible[torch.argsort(depth[visible].detach(), stable=True)]
        m2 = mean2d[order]
        c2 = cov2d[order]
        a, b, c = c2[:, 0, 0], c2[:, 0, 1], c2[:, 1, 1]
        det = a * c - b * b
        conic = torch.stack([c / det, -b / det, a / det], dim=-1)
        col = view_color(colors, sh, means, camera)[order]
        raw, trans = composite(m2, conic, opacity[order], col, bg, h, w)

    image = raw
    if color_tune:
        gain = camera.color_gain.to(dtype)
        bias = camera.color_bias.to(dtype)
        image = torch.clamp(raw * gain + bias, 0.0, 1.0)
    return RenderOutput(image=image, transmittance=trans, raw_image=raw, visible=visible,
                        mean2d=mean2d if retain_mean2d else None)


def effective_opacity(cloud_opacity_logit, mask_logit=None, eps: float = 0.01,
                      mask_mode: str = "off", mask_value=None):
    from .mask_stage import binary_mask, masked_opacity

    o = torch.sigmoid(cloud_opacity_logit)
    if mask_mode == "off":
        return o
    if mask_mode != "apply":
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    m = binary_mask(mask_logit, eps) if mask_value is None else mask_value
    return masked_opacity(o, m)


def render(cloud: GaussianCloud, camera: Camera, *, t: Optional[float] = None, deformation=None,
           mask_mode: str = "off", eps: float = 0.01, background=None, params=None,
           retain_mean2d: bool = False, mask_value=None) -> RenderOutput:
    """Render a cloud (or a dict of live parameter tensors via ``params``).

    ``deformation`` is a callable ``(attrs, t) -> attrs`` applied before
    projection; attrs is a dict with position/log_scale/rotation/
    opacity_logit/gamma/group tensors.
    """
    attrs = dict(params) if params is not None else {
        "position": cloud.position, "log_scale": cloud.log_scale, "rotation": cloud.rotation,
        "opacity_logit": cloud.opacity_logit, "color": cloud.color, "sh": cloud.sh,
        "mask_logit": cloud.mask_logit, "gamma": cloud.gamma,
    }
    attrs.setdefault("group", cloud.group if cloud is not None else None)
    if deformation is not None:
        attrs = deformation(attrs, t)
    opacity = effective_opacity(attrs["opacity_logit"], attrs.get("mask_logit"), eps, mask_mode, mask_value)
    out = rasterize(attrs["position"], attrs["log_scale"], attrs["rotation"], opacity, attrs["color"],
                    camera, sh=attrs.get("sh"), background=background, retain_mean2d=retain_mean2d)
    out.inputs = attrs
    return out


def render_backward(output: RenderOutput, grad_image: torch.Tensor,
                    wrt: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of <grad_image, image> w.r.t. named leaf tensors.

    ``wrt`` tensors must be the leaves the forward pass was built from.
    """
    if tuple(grad_image.shape) != tuple(output.image.shape):
        raise RuntimeError("image gradient does not match the forward render")
    names = list(wrt)
    leaves = [wrt[k] for k in names]
    grads = torch.autograd.grad(output.image, leaves, grad_outputs=grad_image,
                                retain_graph=True, allow_unused=True)
    return {k: torch.zeros_like(v) if g is None else g for k, v, g in zip(names, leaves, grads)}
