import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import correlate

from relaygs.metrics import (SSIM_C1, SSIM_C2, MetricReport, dssim, l1_loss, photometric_loss, psnr, ssim)

img = arrays(np.float64, (12, 13, 3), elements=st.floats(0.0, 1.0))


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def reference_ssim(a, b, size=11, sigma=1.5):
    """Valid-mode Gaussian-window SSIM via scipy correlation, channel by channel."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    r = (size - 1) // 2
    vals = []
    for c in range(a.shape[2]):
        f = lambda z: correlate(z, w, mode="constant")[r:z.shape[0] - r, r:z.shape[1] - r]
        xa, xb = a[..., c], b[..., c]
        ma, mb = f(xa), f(xb)
        va, vb, cab = f(xa * xa) - ma ** 2, f(xb * xb) - mb ** 2, f(xa * xb) - ma * mb
        vals.append(((2 * ma * mb + SSIM_C1) * (2 * cab + SSIM_C2)) /
                    ((ma ** 2 + mb ** 2 + SSIM_C1) * (va + vb + SSIM_C2)))
    return float(np.mean(vals))


def test_psnr_examples():
    a = torch.rand(8, 8, 3, dtype=torch.float64)
    assert psnr(a, a) == math.inf
    assert psnr(torch.zeros(4, 4, 3), torch.ones(4, 4, 3)) == 0.0
    b = torch.full((4, 4, 3), 0.5, dtype=torch.float64)
    assert psnr(b, b + 0.1) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr(torch.zeros(2, 2, 3), torch.zeros(3, 2, 3))


def test_ssim_matches_scipy_reference():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(20, 24, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert float(ssim(t(a), t(b))) == pytest.approx(reference_ssim(a, b), abs=1e-12)


def test_ssim_identical_is_one():
    a = torch.rand(16, 16, 3, dtype=torch.float64)
    assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negated_structure():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.2, 0.8, (16, 16, 3))
    b = 2 * a.mean() - a
    assert float(ssim(t(a), t(b))) <= 0.0


def test_ssim_constant_images_closed_form():
    a, b = 0.3, 0.7
    want = (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
    got = float(ssim(torch.full((16, 16, 3), a, dtype=torch.float64), torch.full((16, 16, 3), b, dtype=torch.float64)))
    assert got == pytest.approx(want, abs=1e-12)


def test_ssim_small_image_falls_back():
    a = torch.rand(5, 6, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-12)
    assert float(ssim(a, 1 - a)) < 1.0


def test_l1_examples():
    a = torch.rand(4, 4, 3, dtype=torch.float64)
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(torch.zeros(4, 4, 3), torch.ones(4, 4, 3))) == 1.0
    b = torch.rand(4, 4, 3, dtype=torch.float64)
    assert float(l1_loss(a + 3 * (b - a), a)) == pytest.approx(3 * float(l1_loss(b, a)), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(img, img, img)
def test_metric_symmetries(a, b, c):
    a, b, c = t(a), t(b), t(c)
    assert psnr(a, b) == psnr(b, a)
    assert float(ssim(a, b)) == pytest.approx(float(ssim(b, a)), abs=1e-12)
    assert float(l1_loss(a, c)) <= float(l1_loss(a, b)) + float(l1_loss(b, c)) + 1e-12
    d = float(dssim(a, b))
    assert -1e-12 <= d <= 1.0 + 1e-12


@settings(max_examples=30, deadline=None)
@given(img, img, st.floats(0.01, 0.99))
def test_photometric_loss_zero_iff_equal(a, b, lam):
    a, b = t(a), t(b)
    assert float(photometric_loss(a, a, lam)) == pytest.approx(0.0, abs=1e-12)
    if not torch.equal(a, b):
        assert float(photometric_loss(a, b, lam)) > 0.0


def test_metric_report():
    a = torch.rand(12, 12, 3, dtype=torch.float64)
    b = torch.clamp(a + 0.1, 0, 1)
    rep = MetricReport.from_pairs({"x": (a, a), "y": (a, b)}, {"stage1": [1.0, 0.5]})
    assert rep.per_view_psnr["x"] == math.inf
    assert rep.mean_psnr == rep.per_view_psnr["y"]
    d = rep.to_dict()
    assert d["per_view_psnr"]["x"] == "inf" and d["loss_curves"] == {"stage1": [1.0, 0.5]}
    same = MetricReport.from_pairs({"x": (a, a)})
    assert same.mean_psnr == math.inf and same.to_dict()["mean_psnr"] == "inf"
