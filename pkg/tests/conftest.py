import time

import numpy as np
import pytest

from icl_lab.features import TokenDistribution
from icl_lab.trainer import TrainConfig, gd_run


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def balanced_run():
    """K = 4, N = 256 uniform run trained until L - Llow <= 0.01."""
    cfg = TrainConfig(
        TokenDistribution.balanced(4), 256, eta=5.0, max_iters=100_000,
        estimator="truncated", epsilon=0.01, record_every=1,
    )
    start = time.perf_counter()
    traj = gd_run(cfg)
    traj.elapsed = time.perf_counter() - start
    return cfg, traj


@pytest.fixture(scope="session")
def imbalanced_run():
    """K = 4, N = 512 run with one dominant feature, trained until every gap <= 0.01."""
    cfg = TrainConfig(
        TokenDistribution([0.55, 0.15, 0.15, 0.15], "imbalanced"), 512, eta=1.0,
        max_iters=20_000, estimator="truncated", epsilon=0.01, record_every=1,
    )
    return cfg, gd_run(cfg)
