import numpy as np
import pytest
import torch

from relaygs.scene import Camera, GaussianCloud


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def front_camera(size=32, focal=None):
    """Camera at the origin looking down +z (identity rotation)."""
    f = focal or size * 0.9
    return Camera(f, f, size / 2.0, size / 2.0, size, size, np.eye(3), np.zeros(3))


def random_cloud(n, seed=0, dtype=torch.float64, depth=(3.0, 5.0), spread=0.8):
    rng = np.random.default_rng(seed)
    pos = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                           rng.uniform(*depth, n)])
    rot = rng.normal(size=(n, 4))
    return GaussianCloud(torch.as_tensor(pos, dtype=dtype), np.log(rng.uniform(0.05, 0.3, (n, 3))),
                         rot, rng.normal(size=n), rng.uniform(0, 1, (n, 3)))


def tiny_spec(motion="linear", seed=0, frames=4, size=16, cams=4):
    from relaygs.synth import BackgroundComponent, desk_scene

    spec = desk_scene(seed, motion, frame_count=frames, k=2)
    spec.image_size = size
    spec.focal = size * 0.95
    spec.n_cameras = cams
    spec.background = [BackgroundComponent("plane", (0.0, 0.0, 0.0), (4.0, 4.0, 0.0), 25)]
    spec.foreground[0].count = 6
    return spec


def tiny_config(**overrides):
    from relaygs.config import PipelineConfig

    base = {"stage1_steps": 4, "stage2_steps": 4, "stage3_steps": 4, "batch_size": 2, "k": 2, "test_cameras": (3,),
            "dtype": "float64", "motion.levels": 1, "motion.features": 4, "motion.spatial_res": 4,
            "motion.temporal_res": 2, "motion.mlp_width": 8, "densify.interval": 2}
    base.update(overrides)
    return PipelineConfig.desk(**base)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
