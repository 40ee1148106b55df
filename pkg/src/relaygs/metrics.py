"""Image metrics and the photometric losses built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List

import torch
import torch.nn.functional as F

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for images in [0, 1]; identical images give +inf."""
    _check_shapes(a, b)
    a = torch.clamp(torch.as_tensor(a, dtype=torch.float64), 0.0, 1.0)
    b = torch.clamp(torch.as_tensor(b, dtype=torch.float64), 0.0, 1.0)
    mse = float(torch.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_shapes(a, b)
    return torch.mean(torch.abs(a - b))


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean local SSIM over H x W x C images (valid-mode Gaussian window).

    Images smaller than the window fall back to one global window with the
    same Gaussian weighting cropped to the image.
    """
    _check_shapes(a, b)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    ch = x.shape[1]
    h, w = x.shape[-2:]
    win = gaussian_window(window, sigma, a.dtype)
    if h < window or w < window:
        top, left = (window - h) // 2, (window - w) // 2
        win = win[top:top + h, left:left + w]
        win = win / win.sum()
    kernel = win.expand(ch, 1, *win.shape).contiguous()

    def filt(z):
        return F.conv2d(z, kernel, groups=ch)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def dssim(a: torch.Tensor, b: torch.Tensor, window: int = 11) -> torch.Tensor:
    return (1.0 - ssim(a, b, window)) / 2.0


def photometric_loss(render: torch.Tensor, target: torch.Tensor, lam: float = 0.2,
                     window: int = 11) -> torch.Tensor:
    """(1 - lam) * L1 + lam * D-SSIM."""
    loss = (1.0 - lam) * l1_loss(render, target)
    if lam:
        loss = loss + lam * dssim(render, target, window)
    return loss


@dataclass
class MetricReport:
    per_view_psnr: Dict[str, float] = field(default_factory=dict)
    mean_psnr: float = float("nan")
    mean_ssim: float = float("nan")
    loss_curves: Dict[str, List[float]] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs, loss_curves=None) -> "MetricReport":
        """``pairs`` maps a view name to (rendered, ground-truth)."""
        rep = cls(loss_curves=dict(loss_curves or {}))
        ssims = []
        for name, (img, gt) in pairs.items():
            rep.per_view_psnr[name] = psnr(img, gt)
            ssims.append(float(ssim(img.to(torch.float64), gt.to(torch.float64))))
        if pairs:
            vals = list(rep.per_view_psnr.values())
            rep.mean_psnr = math.inf if all(math.isinf(v) for v in vals) else \
                sum(v for v in vals if not math.isinf(v)) / max(1, sum(not math.isinf(v) for v in vals))
            rep.mean_ssim = sum(ssims) / len(ssims)
        return rep

    def to_dict(self) -> dict:
        enc = lambda v: "inf" if v == math.inf else v
        return {
            "per_view_psnr": {k: enc(v) for k, v in self.per_view_psnr.items()},
            "mean_psnr": enc(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "loss_curves": self.loss_curves,
        }
