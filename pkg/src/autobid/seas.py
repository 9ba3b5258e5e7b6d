"""Safe exploration by adaptive action selection (SEAS).

At every step SEAS proposes the exploratory action ``a_e`` and the action of
the currently tracked safe policy ``a_s``. It keeps ``a_e`` only if the reward
collected so far plus the best safe-policy Q value of ``a_e`` still reaches
``(1 - eps) * J_s``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .env import Controller, WorldConfig, rollout
from .nn import Adam, MLPSpec, TrainConfig, backward, fold_input_scaling, fold_output_scaling, forward, \
    forward_cache, init_params, loss_and_dout, mlp, standardizer, train_regression
from .policy import Policy, PolicyController


def seas_select(q_at_explore, cum_reward, threshold):
    """One SEAS decision.

    ``q_at_explore`` holds each safe policy's Q at (s_t, a_e); the last axis indexes
    safe policies. Returns ``(explore, temp, q_max)`` where ``temp`` is the index of the
    best safe policy for this step. The safe action for *this* step must be taken from
    the previous step's ``temp`` by the caller.
    """
    q = np.asarray(q_at_explore)
    temp = np.argmax(q, axis=-1)
    q_max = np.take_along_axis(q, np.expand_dims(temp, -1), axis=-1)[..., 0]
    if q_max.ndim == 0:
        # scalar path keeps exact types (e.g. Fraction) for the tabular oracle
        q_max = q_max.item()
        return bool(cum_reward + q_max >= threshold), int(temp), q_max
    explore = np.asarray(cum_reward) + q_max >= threshold
    return explore, temp, q_max


@dataclass(frozen=True)
class QFunction:
    """State-action value network; inputs are the 3 state features and lambda."""

    spec: MLPSpec
    theta: np.ndarray

    def __call__(self, states, actions) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(states), np.asarray(actions, dtype=float).reshape(-1, 1)], axis=1)
        return forward(self.spec, self.theta, x)[:, 0]


QLike = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SafePolicySet:
    policies: list            # callables: states (E, 3) -> lambdas (E,)
    qs: list                  # callables: (states, lambdas) -> values
    j_s: float
    epsilon: float

    def __post_init__(self):
        if not self.policies or len(self.policies) != len(self.qs):
            raise ValueError("need n >= 1 safe policies, each with a Q function")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")

    @property
    def threshold(self) -> float:
        return (1.0 - self.epsilon) * self.j_s

    def __len__(self):
        return len(self.policies)


@dataclass
class SeasTrace:
    a_e: np.ndarray        # (E, T)
    a_s: np.ndarray
    explored: np.ndarray   # bool, True where a_e was executed
    temp: np.ndarray       # safe-policy index chosen at each step (after the update)
    q_max: np.ndarray
    cum_reward: np.ndarray  # reward collected before the step
    threshold: float

    @property
    def explore_rate(self) -> float:
        return float(self.explored.mean()) if self.explored.size else 0.0

    def to_csv(self, path: str | Path, episode: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "chosen", "a_e", "a_s", "temp", "q_max", "cum_reward", "threshold"])
            for t in range(self.a_e.shape[1]):
                w.writerow([t, "explore" if self.explored[episode, t] else "safe", repr(float(self.a_e[episode, t])),
                            repr(float(self.a_s[episode, t])), int(self.temp[episode, t]),
                            repr(float(self.q_max[episode, t])), repr(float(self.cum_reward[episode, t])),
                            repr(float(self.threshold))])


def _as_controller(pi) -> Controller:
    if isinstance(pi, Controller):
        return pi
    if isinstance(pi, Policy):
        return PolicyController(pi)
    if callable(pi):
        return _FnPolicy(pi)
    raise TypeError("exploration policy must be a Policy, a Controller or a callable on states")


class SeasController(Controller):
    """Vectorised Algorithm-1 loop; one independent SEAS state per episode."""

    def __init__(self, pi_e, safe: SafePolicySet, lambda_range: tuple[float, float]):
        self.pi_e = _as_controller(pi_e)
        self.safe = safe
        self.lo, self.hi = lambda_range
        self.traces: list[dict] = []

    def reset(self, n, episode_ids):
        self.pi_e.reset(n, episode_ids)
        self.temp = np.zeros(n, dtype=np.int64)
        self.cum = np.zeros(n)
        self._rec = {k: [] for k in ("a_e", "a_s", "explored", "temp", "q_max", "cum_reward")}
        self.traces.append(self._rec)

    def act(self, states, t):
        a_e = np.clip(self.pi_e.act(states, t), self.lo, self.hi)
        safe_actions = np.stack([np.asarray(p(states), dtype=float) for p in self.safe.policies], axis=1)
        a_s = np.clip(safe_actions[np.arange(len(states)), self.temp], self.lo, self.hi)
        q = np.stack([np.asarray(qf(states, a_e), dtype=float) for qf in self.safe.qs], axis=1)
        explore, new_temp, q_max = seas_select(q, self.cum, self.safe.threshold)
        a = np.where(explore, a_e, a_s)
        for k, v in (("a_e", a_e), ("a_s", a_s), ("explored", explore), ("temp", new_temp),
                     ("q_max", q_max), ("cum_reward", self.cum.copy())):
            self._rec[k].append(v)
        self.temp = new_temp
        return a

    def observe(self, rewards):
        self.cum = self.cum + rewards
        self.pi_e.observe(rewards)

    def trace(self) -> SeasTrace:
        cols = {k: np.concatenate([np.stack(tr[k], axis=1) for tr in self.traces]) for k in self.traces[0]}
        return SeasTrace(threshold=self.safe.threshold, **cols)


class FixedRangeController(Controller):
    """Clip the exploratory action into ``[pi_s(s) - xi, pi_s(s) + xi]``."""

    def __init__(self, pi_e, pi_s, xi: float):
        if xi < 0:
            raise ValueError("xi must be >= 0")
        self.pi_e = _as_controller(pi_e)
        self.pi_s = pi_s
        self.xi = xi

    def reset(self, n, episode_ids):
        self.pi_e.reset(n, episode_ids)

    def act(self, states, t):
        a_e = self.pi_e.act(states, t)
        a_s = np.asarray(self.pi_s(states), dtype=float)
        return np.clip(a_e, a_s - self.xi, a_s + self.xi)

    def observe(self, rewards):
        self.pi_e.observe(rewards)


def seas_episode(pi_e, safe: SafePolicySet, config: WorldConfig, seed: int):
    """Run one SEAS episode. Returns ``(Dataset with one trajectory, SeasTrace)``."""
    ctl = SeasController(pi_e, safe, config.lambda_range)
    ro = rollout(config, [seed], ctl)
    return Dataset.from_rollouts(ro, noise_kind="seas"), ctl.trace()


def fixed_range_episode(pi_e, pi_s, xi: float, config: WorldConfig, seed: int) -> Dataset:
    ro = rollout(config, [seed], FixedRangeController(pi_e, pi_s, xi))
    return Dataset.from_rollouts(ro, noise_kind="fixed_range")


def estimate_Js(policy, config: WorldConfig, episodes: int = 2000, seed_offset: int = 0) -> tuple[float, float]:
    """Mean noise-free return over ``episodes`` seeded rollouts, with its standard error."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    ctl = policy if isinstance(policy, Controller) else _FnPolicy(policy)
    ret = rollout(config, np.arange(seed_offset, seed_offset + episodes), ctl).returns
    se = float(ret.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(ret.mean()), se


class _FnPolicy(Controller):
    def __init__(self, fn):
        self.fn = fn

    def act(self, states, t):
        return self.fn(states)


# --- SARSA-style Q fitting -------------------------------------------------


@dataclass(frozen=True)
class SarsaConfig:
    gamma: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    step_size: float = 1e-3
    batch_size: int = 256
    td_steps: int = 3000
    target_refresh: int = 250
    # regress onto Monte Carlo returns-to-go first; the TD phase then starts near its fixed point
    warm_start_steps: int = 2000
    seed: int = 0


def returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rewards, dtype=float)
    acc = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        acc = rewards[:, t] + gamma * acc
        out[:, t] = acc
    return out


def fit_q_sarsa(D: Dataset, gamma: float = 1.0, config: SarsaConfig | None = None) -> QFunction:
    """Evaluate the data-collecting policy: Q(s_t, a_t) -> r_t + gamma * Q_target(s_t+1, a_t+1)."""
    config = config or SarsaConfig(gamma=gamma)
    if len(D) == 0:
        raise ValueError("cannot fit Q on an empty dataset")
    N, T = D.actions.shape
    X = np.concatenate([D.states, D.actions[..., None]], axis=2).reshape(-1, 4)
    # next (s, a) along the same trajectory; the last step bootstraps from 0
    X_next = np.concatenate([D.next_states, np.concatenate([D.actions[:, 1:], D.actions[:, -1:]], axis=1)[..., None]],
                            axis=2).reshape(-1, 4)
    not_done = np.ones((N, T))
    not_done[:, -1] = 0.0
    not_done = not_done.ravel()
    r = D.rewards.ravel()
    xm, xs = standardizer(X)
    scale = float(np.abs(returns_to_go(D.rewards, gamma)).mean()) or 1.0
    spec = mlp(4, 1, config.hidden)
    rng = np.random.default_rng(config.seed)
    Xn, Xn_next = (X - xm) / xs, (X_next - xm) / xs
    r_n = r / scale
    theta = init_params(spec, rng)
    if config.warm_start_steps:
        g = returns_to_go(D.rewards, gamma).ravel() / scale
        theta = train_regression(spec, Xn, g, TrainConfig(config.step_size, config.batch_size,
                                                          config.warm_start_steps, seed=config.seed),
                                 normalize=False)
    target = theta.copy()
    opt = Adam(spec.n_params, config.step_size)
    n = len(Xn)
    bs = min(config.batch_size, n)
    for step in range(config.td_steps):
        if step % config.target_refresh == 0:
            target = theta.copy()
        idx = rng.integers(0, n, size=bs)
        y = r_n[idx] + gamma * not_done[idx] * forward(spec, target, Xn_next[idx])[:, 0]
        pred, cache = forward_cache(spec, theta, Xn[idx])
        _, dout = loss_and_dout("squared", pred, y[:, None])
        opt.step(theta, backward(spec, theta, cache, dout))
    theta = fold_output_scaling(spec, theta, 0.0, scale)
    return QFunction(spec, fold_input_scaling(spec, theta, xm, xs))


def exact_q_injection(q_fn: QLike) -> QLike:
    """Wrap any callable as a SafePolicySet Q (used by the oracle tests)."""
    return lambda states, actions: np.asarray(q_fn(np.atleast_2d(states), np.asarray(actions, dtype=float)),
                                              dtype=float)
