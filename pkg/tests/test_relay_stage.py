import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relaygs.relay_stage import (ReachSchedule, blur, build_pseudo_view, pseudo_views, replicate_relay,
                                 stage2_train)
from relaygs.scene import RELAY, ConfigError, GaussianCloud, segment_frames
from relaygs.synth import generate_scene, seed_points
from relaygs.training import init_cloud_from_points

from conftest import random_cloud, tiny_config, tiny_spec


def test_replicate_counts_and_tags():
    fg = random_cloud(100, 0)
    segs = segment_frames(256, 16)
    relay = replicate_relay(fg, segs)
    assert len(relay) == 1600
    assert (relay.group == RELAY).all()
    for s in segs:
        part = relay.select(relay.segment == s.index)
        assert torch.equal(part.position, fg.position)
    relay.validate(n_segments=len(segs))


def test_replicate_single_segment_is_copy():
    fg = random_cloud(5, 1)
    relay = replicate_relay(fg, segment_frames(16, 16))
    assert torch.equal(relay.position, fg.position) and torch.equal(relay.color, fg.color)
    relay.position += 1.0
    assert not torch.equal(relay.position, fg.position)


def test_replicate_edge_cases():
    with pytest.warns(RuntimeWarning):
        assert len(replicate_relay(GaussianCloud.empty(), segment_frames(32, 16))) == 0
    with pytest.raises(ConfigError):
        replicate_relay(random_cloud(3), [])


def test_pseudo_view_examples():
    ims = [torch.full((2, 2, 3), v, dtype=torch.float64) for v in (0.3, 0.6, 0.9)]
    assert torch.allclose(build_pseudo_view(ims), torch.full((2, 2, 3), 0.6, dtype=torch.float64), atol=1e-15)
    same = torch.rand(3, 4, 3, dtype=torch.float64)
    assert torch.equal(build_pseudo_view([same, same.clone(), same.clone()]), same)
    assert torch.equal(build_pseudo_view(ims, (1.0, 0.0, 0.0)), ims[0])
    with pytest.raises(ConfigError):
        build_pseudo_view(ims, (0.5, 0.5, 0.1))
    with pytest.raises(ConfigError):
        build_pseudo_view([ims[0], torch.zeros(3, 3, 3)])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2, 2, 3), elements=st.floats(0, 1)), st.floats(-3, 3), st.floats(-1, 1),
       st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
def test_pseudo_view_commutes_with_affine_maps(ims, a, b, raw):
    w = np.array(raw) / np.sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    images = [torch.as_tensor(i) for i in ims]
    lhs = build_pseudo_view([a * i + b for i in images], w)
    rhs = a * build_pseudo_view(images, w) + b
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_pseudo_views_cover_every_segment():
    _, frames, _ = generate_scene(tiny_spec(frames=4))
    segs = segment_frames(4, 2)
    views = pseudo_views(frames, segs, [0, 1])
    assert set(views) == {(c, s.index) for c in (0, 1) for s in segs}
    v = views[(1, 1)]
    assert v.frames == (3, 4)
    assert torch.allclose(v.image, 0.5 * frames.image(1, 3) + 0.5 * frames.image(1, 4))
    mid = pseudo_views(frames, segment_frames(4, 4), [0], middle_only=True)[(0, 0)]
    assert mid.frames == (2,) and torch.equal(mid.image, frames.image(0, 2))


def test_blur_preserves_constants_and_identity():
    img = torch.rand(9, 7, 3, dtype=torch.float64)
    assert torch.equal(blur(img, 0.0), img)
    flat = torch.full((9, 7, 3), 0.4, dtype=torch.float64)
    assert torch.allclose(blur(flat, 1.5), flat, atol=1e-15)
    assert float(blur(img, 2.0).std()) < float(img.std())


def test_reach_schedule():
    r = ReachSchedule(4.0, 0.5)
    assert r(0, 100) == 4.0 and r(25, 100) == 2.0 and r(50, 100) == 0.0 and r(90, 100) == 0.0
    assert ReachSchedule()(0, 100) == 0.0


def test_stage2_noop_on_empty_foreground():
    _, frames, _ = generate_scene(tiny_spec("static", frames=4))
    bg = random_cloud(5, 2)
    res = stage2_train(bg, GaussianCloud.empty(), frames, segment_frames(4, 2), tiny_config())
    assert torch.equal(res.cloud.position, bg.position) and res.losses == []


def test_stage2_freezes_background():
    gt, frames, _ = generate_scene(tiny_spec(frames=4))
    cloud = init_cloud_from_points(*seed_points(gt))
    bg = cloud.select(torch.arange(len(cloud)) < 20)
    fg = cloud.select(torch.arange(len(cloud)) >= 20)
    segs = segment_frames(4, 2)
    relay = replicate_relay(fg, segs)
    res = stage2_train(bg, relay, frames, segs, tiny_config(), steps=3)
    out = res.cloud
    kept = out.select(out.group != RELAY)
    assert torch.equal(kept.position, bg.position) and torch.equal(kept.opacity_logit, bg.opacity_logit)
    moved = out.select(out.group == RELAY)
    assert len(res.losses) == 3
    assert not torch.equal(moved.position[:len(relay)], relay.position) or len(moved) != len(relay)
