import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from relaygs.optim import (AdamState, DensifyConfig, GradStats, LRSchedule, NonFiniteGradientError,
                           ParameterStore, adam_step, densify_and_prune, finite_diff_check)
from relaygs.scene import BACKGROUND, FOREGROUND, GaussianCloud


def numpy_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-15):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def store_with(values, group="fg-gaussians"):
    s = ParameterStore()
    s.add("w", torch.tensor(values, dtype=torch.float64), group)
    return s


def run(store, state, grads, lr):
    for g in grads:
        store["w"].grad = torch.as_tensor(g, dtype=torch.float64)
        adam_step(store, state, {"w": lr})


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(12)]
    s = store_with(p0)
    run(s, AdamState(), grads, 0.01)
    np.testing.assert_allclose(s["w"].detach().numpy(), numpy_adam(p0, grads, 0.01), rtol=0, atol=1e-14)


def test_adam_matches_torch_adam():
    rng = np.random.default_rng(1)
    p0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(6)]
    ref = torch.tensor(p0, requires_grad=True)
    opt = torch.optim.Adam([ref], lr=0.05, eps=1e-15)
    for g in grads:
        ref.grad = torch.as_tensor(g)
        opt.step()
    s = store_with(p0)
    run(s, AdamState(), grads, 0.05)
    assert torch.allclose(s["w"].detach(), ref.detach(), atol=1e-13)


def test_zero_gradient_leaves_parameters():
    s = store_with([1.0, -2.0])
    run(s, AdamState(), [[0.0, 0.0]] * 3, 0.1)
    assert s["w"].detach().tolist() == [1.0, -2.0]


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-6), st.floats(1e-5, 1.0))
def test_first_step_is_signed_learning_rate(g, lr):
    s = store_with([0.0])
    run(s, AdamState(), [[g]], lr)
    assert math.isclose(float(s["w"].detach()[0]), -lr * math.copysign(1.0, g), rel_tol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10).filter(lambda g: abs(g) > 1e-6), st.floats(1e-4, 0.5))
def test_first_step_scales_with_rate(g, lr):
    a, b = store_with([0.0]), store_with([0.0])
    run(a, AdamState(), [[g]], lr)
    run(b, AdamState(), [[g]], 2 * lr)
    assert float(b["w"].detach()[0]) == 2 * float(a["w"].detach()[0])


def test_identical_stores_stay_identical():
    rng = np.random.default_rng(2)
    p0 = rng.normal(size=7)
    grads = [rng.normal(size=7) for _ in range(5)]
    a, b = store_with(p0), store_with(p0)
    run(a, AdamState(), grads, 0.01)
    run(b, AdamState(), grads, 0.01)
    assert torch.equal(a["w"], b["w"])


def test_nonfinite_gradient_rejected_before_update():
    s = store_with([1.0, 2.0, 3.0])
    s.add("v", torch.zeros(2, dtype=torch.float64), "gamma")
    s["v"].grad = torch.tensor([1.0, 1.0], dtype=torch.float64)
    s["w"].grad = torch.tensor([0.0, float("nan"), 0.0], dtype=torch.float64)
    with pytest.raises(NonFiniteGradientError) as err:
        adam_step(s, AdamState(), {"v": 0.1, "w": 0.1})
    assert err.value.name == "w" and err.value.index == 1
    assert s["v"].detach().tolist() == [0.0, 0.0]


def test_group_beta2_override():
    rng = np.random.default_rng(4)
    p0 = rng.normal(size=3)
    grads = [rng.normal(size=3) for _ in range(8)]
    s = ParameterStore()
    s.add("mask-logits.bg", torch.tensor(p0), "mask-logits")
    state = AdamState(group_beta2={"mask-logits": 0.9})
    for g in grads:
        s["mask-logits.bg"].grad = torch.as_tensor(g, dtype=torch.float64)
        adam_step(s, state, {"mask-logits.bg": 0.01})
    np.testing.assert_allclose(s["mask-logits.bg"].detach().numpy(), numpy_adam(p0, grads, 0.01, b2=0.9), atol=1e-14)


def test_store_flat_views():
    s = ParameterStore()
    s.add("a", torch.ones(2, 2, dtype=torch.float64), "gamma")
    s.add("b", torch.zeros(3, dtype=torch.float64), "gamma")
    s.add("c", torch.zeros(1, dtype=torch.float64), "hexplane")
    assert s.flat("gamma").numel() == 7 and s.flat_grad("gamma").numel() == 7
    assert s.numel() == 8
    assert list(s.names("hexplane")) == ["c"]


def test_lr_schedule_endpoints():
    sch = LRSchedule(2e-4, 2e-6, 100)
    assert sch(0) == pytest.approx(2e-4, rel=1e-15)
    assert sch(100) == pytest.approx(2e-6, rel=1e-15)
    assert sch(50) == pytest.approx(2e-5, rel=1e-12)
    with pytest.raises(ValueError):
        LRSchedule(0.0, 1.0, 10)


def test_densify_defaults_follow_ratios():
    cfg = DensifyConfig()
    assert cfg.grad_threshold_fg == cfg.grad_threshold_bg / 2
    assert cfg.scale_split_threshold_fg == pytest.approx(0.1 * cfg.scale_split_threshold_bg)


def cloud_of(scales, opacities, groups):
    n = len(scales)
    return GaussianCloud(torch.zeros(n, 3, dtype=torch.float64), np.log(np.array(scales, float))[:, None].repeat(3, 1),
                         torch.tensor([[1.0, 0, 0, 0]] * n), np.log(np.array(opacities) / (1 - np.array(opacities))),
                         torch.full((n, 3), 0.5), mask_logit=np.arange(n, dtype=float),
                         gamma=[[0.0] * 3 if g == BACKGROUND else [0.1, 0.2, 0.3] for g in groups], group=groups)


def test_densify_examples():
    cfg = DensifyConfig()
    cloud = cloud_of([5e-4, 5e-4, 0.5, 0.5], [0.5, 0.5, 0.5, 0.001], [BACKGROUND, FOREGROUND, FOREGROUND, BACKGROUND])
    grads = torch.tensor([5e-5, 2e-4, 2e-4, 1.0])
    res = densify_and_prune(cloud, grads, cfg, generator=torch.Generator().manual_seed(0))
    assert (res.n_pruned, res.n_cloned, res.n_split) == (1, 1, 1)
    assert len(res.cloud) == 4 - 1 + 1 + 2 - 1
    out = res.cloud
    # untouched bg row first, then the surviving fg clone parent, clone, split children
    assert float(out.mask_logit[0]) == 0.0
    clones = out.mask_logit == 1.0
    assert int(clones.sum()) == 2
    kids = out.mask_logit == 2.0
    assert int(kids.sum()) == 2
    assert torch.allclose(torch.exp(out.log_scale[kids]), torch.full((2, 3), 0.5 / 1.6, dtype=torch.float64))
    assert torch.equal(out.gamma[kids], torch.tensor([[0.1, 0.2, 0.3]] * 2, dtype=torch.float64))
    assert out.generation == 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-4, 1.0), st.floats(1e-4, 0.999), st.sampled_from([BACKGROUND, FOREGROUND]),
                          st.floats(0.0, 1e-3)), min_size=1, max_size=25))
def test_densify_count_identity(rows):
    scales, ops, groups, grads = zip(*rows)
    cloud = cloud_of(scales, ops, list(groups))
    res = densify_and_prune(cloud, torch.tensor(grads), DensifyConfig(max_gaussians=10_000),
                            generator=torch.Generator().manual_seed(1))
    assert len(res.cloud) == len(cloud) - res.n_pruned + res.n_cloned + 2 * res.n_split - res.n_split
    assert len(res.source) == len(res.cloud)
    assert int(res.fresh.sum()) == res.n_cloned + 2 * res.n_split


def test_densify_respects_groups_and_budget():
    cloud = cloud_of([5e-4] * 4, [0.5] * 4, [BACKGROUND, FOREGROUND, FOREGROUND, FOREGROUND])
    res = densify_and_prune(cloud, torch.full((4,), 1.0), DensifyConfig(max_gaussians=6), groups=[FOREGROUND])
    assert res.n_cloned == 2 and len(res.cloud) == 6


def test_grad_stats_mean():
    st_ = GradStats.zeros(3)
    st_.add(torch.tensor([0, 2]), torch.tensor([1.0, 3.0]))
    st_.add(torch.tensor([0]), torch.tensor([2.0]))
    assert st_.mean().tolist() == [1.5, 0.0, 3.0]


def test_finite_diff_quadratic_exact():
    s = store_with([0.3, -1.2, 2.5])
    res = finite_diff_check(lambda: 0.5 * (s["w"] ** 2).sum(), s)
    assert res.max_rel_error < 1e-9


def test_finite_diff_constant_loss():
    s = store_with([0.3, -1.2])
    res = finite_diff_check(lambda: s["w"].sum() * 0 + 4.0, s)
    assert res.max_rel_error == 0.0


def test_finite_diff_detects_wrong_gradient():
    s = store_with([0.3, -1.2])
    wrong = {"w": torch.tensor([1.0, 1.0], dtype=torch.float64)}
    res = finite_diff_check(lambda: (s["w"] ** 3).sum(), s, analytic=wrong)
    assert res.max_rel_error > 0.5


def test_finite_diff_rejects_nonfinite_loss():
    s = store_with([0.0])
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda: torch.log(s["w"]).sum(), s)
