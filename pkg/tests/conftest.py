import warnings

import numpy as np
import pytest

from mapforge import register, sim2d


@pytest.fixture(scope="session")
def small_dataset():
    """40-frame two-lap loop, 64 beams: cheap but structurally complete."""
    env = sim2d.default_scene()
    traj = sim2d.loop_trajectory(sim2d.default_loop(), 40, laps=2)
    cfg = sim2d.ScanConfig(num_beams=64, max_range=12.0, range_noise_sigma=0.01, seed=3)
    return sim2d.generate_dataset(env, traj, cfg)


@pytest.fixture(scope="session")
def small_init(small_dataset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return register.incremental_warm_start(small_dataset, register.IcpConfig())


@pytest.fixture(scope="session")
def clean_dataset():
    """Noise-free variant for exactness checks."""
    env = sim2d.default_scene()
    traj = sim2d.loop_trajectory(sim2d.default_loop(), 24, laps=1)
    cfg = sim2d.ScanConfig(num_beams=64, max_range=12.0, range_noise_sigma=0.0, seed=5)
    return sim2d.generate_dataset(env, traj, cfg)


def random_se2(rng, scale_t=2.0, scale_r=np.pi):
    from mapforge.geometry import Pose

    return Pose.se2(
        rng.uniform(-scale_t, scale_t),
        rng.uniform(-scale_t, scale_t),
        rng.uniform(-scale_r, scale_r),
    )
