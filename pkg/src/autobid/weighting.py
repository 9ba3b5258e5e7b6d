"""Robust trajectory weighting.

A reward model smooths the per-step rewards, the smoothed returns are
compared with a fitted initial-state value, and every transition of a
trajectory is sampled with probability proportional to ``exp(quality / alpha)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, WeightTable, discounted_sum
from .nn import MLPSpec, TrainConfig, forward, mlp, train_regression

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardModel:
    spec: MLPSpec
    theta: np.ndarray

    def __call__(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(states), np.asarray(actions, dtype=float).reshape(-1, 1)], axis=1)
        return forward(self.spec, self.theta, x)[:, 0]


@dataclass(frozen=True)
class InitialValueModel:
    spec: MLPSpec
    theta: np.ndarray

    def __call__(self, s0: np.ndarray) -> np.ndarray:
        return forward(self.spec, self.theta, np.atleast_2d(s0))[:, 0]


@dataclass
class QualityVector:
    advantage: np.ndarray   # A_i
    relabeled: np.ndarray   # R-bar_i
    baseline: np.ndarray    # V-hat(s_i0) after flooring
    floored: np.ndarray     # which baselines hit v_floor


@dataclass(frozen=True)
class WeightingConfig:
    alpha: float = 0.1
    gamma: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    reward_train: TrainConfig = field(default_factory=lambda: TrainConfig(step_size=1e-3, gradient_steps=3000))
    value_train: TrainConfig = field(default_factory=lambda: TrainConfig(step_size=1e-3, gradient_steps=1500))
    v_floor_frac: float = 1e-3
    # "robust" relabels with the reward model, "raw" uses the observed rewards
    returns: str = "robust"


def fit_reward_model(D: Dataset, config: WeightingConfig = WeightingConfig()) -> RewardModel:
    if len(D) == 0:
        raise ValueError("cannot fit a reward model on an empty dataset")
    f = D.flat()
    X = np.concatenate([f["s"], f["a"][:, None]], axis=1)
    spec = mlp(4, 1, config.hidden)
    return RewardModel(spec, train_regression(spec, X, f["r"], config.reward_train))


def relabel_returns(D: Dataset, model, gamma: float = 1.0) -> np.ndarray:
    """R-bar_i = sum_t gamma^t * model(s_it, a_it)."""
    N, T = D.actions.shape
    r_bar = model(D.states.reshape(-1, 3), D.actions.reshape(-1)).reshape(N, T)
    return discounted_sum(r_bar, gamma)


def fit_initial_value(D: Dataset, relabeled: np.ndarray, config: WeightingConfig = WeightingConfig()) -> InitialValueModel:
    s0 = D.states[:, 0, :]
    spec = mlp(3, 1, config.hidden)
    return InitialValueModel(spec, train_regression(spec, s0, relabeled, config.value_train))


def quality(relabeled, baseline, v_floor: float = 0.0):
    """(R-bar - V-hat) / V-hat, with V-hat floored at ``v_floor``.

    Returns ``(advantage, floored_mask)`` for arrays, a float for scalars.
    """
    r = np.asarray(relabeled, dtype=float)
    v = np.asarray(baseline, dtype=float)
    floored = v < v_floor
    if np.any(floored):
        log.warning("%d initial-state value(s) below floor %.3g; clamped", int(np.sum(floored)), v_floor)
        v = np.maximum(v, v_floor)
    adv = (r - v) / v
    if adv.ndim == 0:
        return float(adv)
    return adv, floored


def trajectory_weights(advantage: np.ndarray, alpha: float) -> np.ndarray:
    """Per-trajectory probabilities proportional to exp(A / alpha), stabilised."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    z = np.asarray(advantage, dtype=float) / alpha
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def weights(qualities, alpha: float, D: Dataset) -> WeightTable:
    """Broadcast trajectory weights to all T transitions, normalised over the dataset."""
    adv = qualities.advantage if isinstance(qualities, QualityVector) else np.asarray(qualities, dtype=float)
    if len(adv) != len(D):
        raise ValueError("one quality value per trajectory required")
    T = D.horizon
    p = trajectory_weights(adv, alpha)
    w = np.repeat(p[:, None] / T, T, axis=1)
    return WeightTable(w / w.sum())


def compute_weights(D: Dataset, config: WeightingConfig = WeightingConfig()):
    """Full pipeline. Returns ``(WeightTable, QualityVector)``."""
    if config.returns == "robust":
        model = fit_reward_model(D, config)
        r_bar = relabel_returns(D, model, config.gamma)
    elif config.returns == "raw":
        r_bar = D.returns(config.gamma)
    else:
        raise ValueError(f"unknown returns mode {config.returns!r}")
    vmodel = fit_initial_value(D, r_bar, config)
    base = vmodel(D.states[:, 0, :])
    v_floor = config.v_floor_frac * float(np.mean(D.returns(config.gamma)))
    adv, floored = quality(r_bar, base, v_floor)
    q = QualityVector(adv, r_bar, np.maximum(base, v_floor), floored)
    return weights(q, config.alpha, D), q
