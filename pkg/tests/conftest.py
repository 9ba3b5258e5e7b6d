import dataclasses

import numpy as np
import pytest

from autobid.env import desk_config
from autobid.iql import IqlConfig
from autobid.nn import TrainConfig
from autobid.orchestrator import HeuristicConfig, RunConfig, initial_safe_policy
from autobid.seas import SarsaConfig
from autobid.weighting import WeightingConfig


def tiny_run_config(**kw) -> RunConfig:
    """T=8 world, 200 episodes per collection, short training: seconds per iteration."""
    world = desk_config(episode_steps=8)
    base = dict(
        world=world, iterations=1, transitions=200 * 8, eval_episodes=200, js_episodes=200,
        heuristic=HeuristicConfig(distill_steps=1500, distill_points=5000),
        weighting=WeightingConfig(reward_train=TrainConfig(1e-3, 256, 300), value_train=TrainConfig(1e-3, 256, 200)),
        iql=IqlConfig(reward_scale=0.1, gradient_steps=300, warm_start_steps=200, target_refresh=100),
        sarsa=SarsaConfig(td_steps=300, warm_start_steps=200, target_refresh=100),
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def desk_policy():
    """The distilled pacing policy on the default desk world."""
    return initial_safe_policy(RunConfig())[0]


@pytest.fixture(scope="session")
def tiny_config():
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_policy(tiny_config):
    return initial_safe_policy(tiny_config)[0]
