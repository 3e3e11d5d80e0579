"""Shared, expensive training fixtures. Each runs once per session."""
import time

import pytest

from gp3.scenegen import make_episode
from gp3.toytask import TaskSpec
from gp3.trainer import TrainConfig, stage1_dataset, train_stage1, train_stage2

STAGE1_SEEDS = (0, 1, 2)
REACH = TaskSpec("reach", n_views=2, distractors=0)


@pytest.fixture(scope="session")
def stage1_data():
    return stage1_dataset(200)


@pytest.fixture(scope="session")
def stage1_runs(stage1_data, tmp_path_factory):
    """Default-config Stage-1 runs on 200 scenes, one per seed: {seed: (TrainResult, seconds)}."""
    runs = {}
    for seed in STAGE1_SEEDS:
        t0 = time.perf_counter()
        res = train_stage1(stage1_data, TrainConfig(seed=seed), out_dir=tmp_path_factory.mktemp(f"stage1_{seed}"))
        runs[seed] = (res, time.perf_counter() - t0)
    return runs


@pytest.fixture(scope="session")
def reach_episodes():
    return [make_episode(i, REACH) for i in range(100)]


@pytest.fixture(scope="session")
def reach_policy(stage1_runs, reach_episodes, tmp_path_factory):
    """Stage-2 MLP policy on 100 expert reach episodes with the CLI defaults: (TrainResult, seconds)."""
    t0 = time.perf_counter()
    cfg = TrainConfig(stage=2, epochs=100, batch=32, seed=0)
    res = train_stage2(reach_episodes, stage1_runs[0][0].checkpoint, cfg, out_dir=tmp_path_factory.mktemp("stage2"))
    return res, time.perf_counter() - t0

