import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from relaygs.motion import (PLANE_AXES, HexPlaneGrid, MotionField, active_set, deform, hexplane_encode, scene_bounds,
                            stage3_train, tv_loss)
from relaygs.scene import BACKGROUND, FOREGROUND, RELAY, segment_frames
from relaygs.synth import generate_scene, seed_points
from relaygs.training import init_cloud_from_points

from conftest import tiny_config, tiny_spec

BOUNDS = torch.tensor([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]], dtype=torch.float64)


def grid(**kw):
    args = dict(levels=1, features=3, spatial_res=4, temporal_res=3, dtype=torch.float64)
    args.update(kw)
    return HexPlaneGrid(BOUNDS, **args)


def fill(g, value):
    with torch.no_grad():
        for p in g.planes:
            p.fill_(value)


def test_constant_planes_give_sixth_power():
    g = grid(levels=2)
    fill(g, 0.7)
    pts = torch.rand(5, 3, dtype=torch.float64) * 2 - 1
    f = hexplane_encode(pts, 0.3, g)
    assert f.shape == (5, 6)
    assert torch.allclose(f, torch.full_like(f, 0.7 ** 6), rtol=1e-14)


def test_node_query_is_product_of_node_features():
    g = grid(spatial_res=3, temporal_res=3)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in g.planes:
            p.copy_(torch.rand(p.shape, dtype=torch.float64, generator=gen))
    # x=-1 -> index 0, y=0 -> index 1, z=1 -> index 2, t=0.5 -> index 1
    idx = {0: 0, 1: 1, 2: 2, 3: 1}
    want = torch.ones(3, dtype=torch.float64)
    for i, (a, b) in enumerate(PLANE_AXES):
        want = want * g.plane(0, i)[0, :, idx[b], idx[a]]
    got = hexplane_encode(torch.tensor([[-1.0, 0.0, 1.0]], dtype=torch.float64), 0.5, g)[0]
    assert torch.allclose(got, want, rtol=1e-14)


def test_midpoint_interpolates_row_values():
    g = grid(spatial_res=2, features=1)
    fill(g, 1.0)
    with torch.no_grad():
        xy = g.plane(0, 0)
        xy[0, 0, :, 0] = 0.2  # x = -1 column
        xy[0, 0, :, 1] = 0.6  # x = +1 column
    f = hexplane_encode(torch.tensor([[0.0, 0.3, -0.2]], dtype=torch.float64), 0.1, g)
    assert float(f.detach()[0, 0]) == pytest.approx(0.4, rel=1e-14)


def test_queries_clamp_to_bounds():
    g = grid()
    inside = hexplane_encode(torch.tensor([[1.0, -1.0, 1.0]], dtype=torch.float64), 1.0, g)
    outside = hexplane_encode(torch.tensor([[5.0, -9.0, 3.0]], dtype=torch.float64), 1.0, g)
    assert torch.equal(inside, outside)


def test_tv_examples():
    g = grid(spatial_res=2, temporal_res=2, features=1)
    fill(g, 0.5)
    assert float(tv_loss(g, 1e-4).detach()) == 0.0
    with torch.no_grad():
        g.plane(0, 0).copy_(torch.tensor([[[[0.0, 1.0], [0.0, 1.0]]]], dtype=torch.float64))
    assert float(tv_loss(g, 1e-4).detach()) == pytest.approx(1e-4 * 0.5, rel=1e-14)
    with torch.no_grad():
        for p in g.planes:
            p.mul_(3.0)
    assert float(tv_loss(g, 1e-4).detach()) == pytest.approx(9 * 1e-4 * 0.5, rel=1e-14)


def test_tv_zero_iff_constant_planes():
    g = grid()
    assert float(tv_loss(g).detach()) > 0.0
    with torch.no_grad():
        for i, p in enumerate(g.planes):
            p.copy_(torch.arange(3, dtype=torch.float64).reshape(1, 3, 1, 1).expand_as(p) + i)
    assert float(tv_loss(g).detach()) == 0.0


def attrs_for(groups, gamma=None):
    n = len(groups)
    gen = torch.Generator().manual_seed(1)
    return {"position": torch.rand(n, 3, dtype=torch.float64, generator=gen) - 0.5,
            "log_scale": torch.full((n, 3), -2.0, dtype=torch.float64),
            "rotation": torch.tensor([[1.0, 0.1, 0.0, 0.0]] * n, dtype=torch.float64),
            "opacity_logit": torch.zeros(n, dtype=torch.float64),
            "color": torch.rand(n, 3, dtype=torch.float64, generator=gen),
            "gamma": torch.zeros(n, 3, dtype=torch.float64) if gamma is None else gamma,
            "group": torch.tensor(groups)}


def field(**kw):
    return MotionField(BOUNDS, levels=1, features=2, spatial_res=4, temporal_res=3, width=8,
                       dtype=torch.float64, **kw)


def zero_deltas(n):
    return {"position": torch.zeros(n, 3, dtype=torch.float64), "rotation": torch.zeros(n, 4, dtype=torch.float64),
            "scale": torch.zeros(n, 3, dtype=torch.float64), "opacity": torch.zeros(n, 1, dtype=torch.float64)}


def test_zero_heads_are_identity():
    a = attrs_for([BACKGROUND, FOREGROUND, RELAY])
    out = deform(a, 0.4, field())
    assert torch.equal(out["position"], a["position"])
    assert torch.equal(out["log_scale"], a["log_scale"])
    assert torch.equal(out["opacity_logit"], a["opacity_logit"])
    assert torch.allclose(out["rotation"], a["rotation"] / a["rotation"].norm(dim=-1, keepdim=True))
    assert torch.equal(out["color"], a["color"])


def test_gamma_zero_doubles_foreground_offset():
    a = attrs_for([BACKGROUND, FOREGROUND])
    d = zero_deltas(2)
    d["position"] = torch.tensor([[0.1, 0.2, 0.3]] * 2, dtype=torch.float64)
    out = deform(a, 0.5, field(), deltas=d)
    assert torch.allclose(out["position"][0] - a["position"][0], d["position"][0], atol=1e-15)
    # exact: mu + (1 + e^0) * d equals mu + 2 * d bit for bit
    assert torch.equal(out["position"][1], a["position"][1] + 2 * d["position"][1])


def test_gamma_log_three():
    gamma = torch.tensor([[math.log(3.0), 0.0, 0.0]], dtype=torch.float64)
    a = attrs_for([RELAY], gamma)
    d = zero_deltas(1)
    d["position"] = torch.ones(1, 3, dtype=torch.float64)
    out = deform(a, 0.5, field(), deltas=d)
    assert torch.allclose(out["position"] - a["position"], torch.tensor([[4.0, 2.0, 2.0]], dtype=torch.float64),
                          atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(-4, 4), st.floats(0.01, 3), st.floats(-2, 2).filter(lambda v: abs(v) > 1e-3))
def test_offset_strictly_monotone_in_gamma(g, step, delta):
    d = zero_deltas(2)
    d["position"] = torch.full((2, 3), delta, dtype=torch.float64)
    gam = torch.tensor([[g, 0, 0], [g + step, 0, 0]], dtype=torch.float64)
    out = deform(attrs_for([FOREGROUND, FOREGROUND], gam), 0.5, field(), deltas=d)
    off = (out["position"] - attrs_for([FOREGROUND, FOREGROUND])["position"])[:, 0]
    assert abs(float(off[1])) > abs(float(off[0]))


def test_deltas_applied_in_log_and_logit_domains():
    a = attrs_for([FOREGROUND])
    d = zero_deltas(1)
    d["scale"][:] = 0.5
    d["opacity"][:] = -1.0
    d["rotation"][:] = torch.tensor([0.0, 0.0, 1.0, 0.0])
    out = deform(a, 0.5, field(), deltas=d)
    assert torch.allclose(out["log_scale"], a["log_scale"] + 0.5)
    assert torch.allclose(out["opacity_logit"], a["opacity_logit"] - 1.0)
    assert float(out["rotation"].norm()) == pytest.approx(1.0, abs=1e-15)


def test_nonfinite_heads_rejected():
    d = zero_deltas(1)
    d["position"][0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        deform(attrs_for([FOREGROUND]), 0.5, field(), deltas=d)


def test_head_isolation_and_ablations():
    f = field(zero_init=False)
    a = attrs_for([BACKGROUND, FOREGROUND])
    a["position"][1] = a["position"][0]
    d = f.deltas(a["position"], 0.3, a["group"])
    assert not torch.allclose(d["position"][0], d["position"][1])
    shared = field(zero_init=False, shared_heads=True)
    ds = shared.deltas(a["position"], 0.3, a["group"])
    assert torch.allclose(ds["position"][0], ds["position"][1])
    plain = field(use_gamma=False)
    dd = zero_deltas(1)
    dd["position"][:] = 1.0
    out = deform(attrs_for([FOREGROUND]), 0.2, plain, deltas=dd)
    assert torch.allclose(out["position"] - attrs_for([FOREGROUND])["position"], torch.ones(1, 3, dtype=torch.float64))


def test_active_set_selects_segment():
    segs = segment_frames(64, 16)
    group = torch.tensor([BACKGROUND, RELAY, RELAY, RELAY, RELAY])
    seg = torch.tensor([-1, 0, 1, 2, 3])
    t = (40 - 1) / 63  # frame 40 lies in segment 2
    assert active_set(group, seg, t, segs, 64).tolist() == [True, False, False, True, False]
    assert active_set(group, seg, (33 - 1) / 63, segs, 64).tolist() == [True, False, False, True, False]
    assert active_set(group, seg, (32 - 1) / 63, segs, 64).tolist() == [True, False, True, False, False]
    one = segment_frames(64, 64)
    assert active_set(group, torch.zeros(5, dtype=torch.int64), 0.7, one, 64).all()
    assert active_set(group, seg, 1.5, segs, 64).tolist() == [True, False, False, False, True]


def test_scene_bounds():
    b = scene_bounds(torch.tensor([[0.0, 0.0, 0.0], [1.0, 2.0, 4.0]]), pad=0.5)
    assert b.tolist() == [[-0.5, -1.0, -2.0], [1.5, 3.0, 6.0]]


def test_stage3_updates_field_and_gamma():
    gt, frames, _ = generate_scene(tiny_spec(frames=4))
    cloud = init_cloud_from_points(*seed_points(gt))
    cloud.group[20:] = FOREGROUND
    cfg = tiny_config()
    f = MotionField(scene_bounds(cloud.position), levels=1, features=4, spatial_res=4, temporal_res=2, width=8,
                    dtype=torch.float64)
    before = [p.detach().clone() for p in f.parameters()]
    res = stage3_train(cloud, f, frames, segment_frames(4, 2), cfg, steps=3)
    assert len(res.losses) == 3
    assert any(not torch.equal(a, b.detach()) for a, b in zip(before, f.parameters()))
    fg = res.cloud.group != BACKGROUND
    assert float(res.cloud.gamma[fg].abs().max()) > 0.0
    assert float(res.cloud.gamma[~fg].abs().max()) == 0.0
