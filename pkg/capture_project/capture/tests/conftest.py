from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import pandas as pd
import pytest
import torch

from capture.dynamics import VesselParams
from capture.evaluation import CSV_COLUMNS
from capture.ppo import ActorCritic, TrainConfig
from capture.task import RewardWeights, TaskConfig

PROJECT_DIR = Path(__file__).resolve().parents[2]
BASE_CONFIG = PROJECT_DIR / "configs" / "base.yaml"


@pytest.fixture
def params() -> VesselParams:
    return VesselParams()


@pytest.fixture
def weights() -> RewardWeights:
    return RewardWeights()


@pytest.fixture
def task() -> TaskConfig:
    return TaskConfig()


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    """A few envs and short rollouts; enough to exercise the loop."""
    return TrainConfig(
        num_envs=4,
        batch_size=32,
        max_iterations=2,
        hidden_size=16,
        update_epochs=2,
        num_minibatches=2,
        checkpoint_interval=0,
    )


def zero_heads(net: ActorCritic) -> ActorCritic:
    with torch.no_grad():
        for layer in (net.mean_head, net.value_head):
            layer.weight.zero_()
            layer.bias.zero_()
    return net


@pytest.fixture
def zero_policy() -> ActorCritic:
    torch.manual_seed(0)
    return zero_heads(ActorCritic(hidden_size=16)).eval()


def metrics_frame(
    controller: str = "rl",
    values: Iterable[float] = (0.0,),
    goals: Iterable[float] = (3.0, 4.0),
    T_norm: float = 1.0,
    delta_d: float = 0.2,
    E_acc_norm: float = 30.0,
    success: bool = True,
) -> pd.DataFrame:
    """
    A sweep table in the CSV schema: one row per (goal, value) with the
    given metric values on every successful row.
    """
    rows = []
    for value in values:
        for goal_d in goals:
            rows.append(
                {
                    "controller": controller,
                    "sweep_axis": "com",
                    "sweep_value": value,
                    "goal_d": goal_d,
                    "goal_bearing_deg": 0.0,
                    "v0": 0.0,
                    "seed": 0,
                    "success": success,
                    "T": T_norm * goal_d if success else np.nan,
                    "T_norm": T_norm if success else np.nan,
                    "delta_d": delta_d if success else np.nan,
                    "E_acc_norm": E_acc_norm if success else np.nan,
                    "solver_degraded_steps": 0,
                }
            )
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


@pytest.fixture
def metrics_table() -> Callable[..., pd.DataFrame]:
    return metrics_frame
