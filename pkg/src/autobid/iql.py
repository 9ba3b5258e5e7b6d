"""Offline training with implicit Q-learning and a deterministic AWR policy.

Minibatches come from the weighted sampler, so trajectory weights decide
which transitions the critic and the policy see.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, WeightTable, WeightedSampler
from .env import Controller, WorldConfig, rollout
from .nn import Adam, MLPSpec, TrainConfig, backward, fold_input_scaling, fold_output_scaling, forward, \
    forward_cache, init_params, load_params, loss_and_dout, mlp, save_params, standardizer, train_regression
from .policy import Policy, PolicyController
from .seas import QFunction, returns_to_go

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class IqlConfig:
    tau: float = 0.6
    beta: float = 1.25
    gamma: float = 1.0
    gradient_steps: int = 3000
    target_refresh: int = 1000
    weight_clip: float = 100.0
    batch_size: int = 256
    step_size: float = 3e-4
    hidden: tuple[int, ...] = (64, 64)
    # advantages enter exp(beta * A) in units of reward_scale * reward
    reward_scale: float = 1.0
    # critic warm start: regression onto Monte Carlo returns-to-go before the TD phase
    warm_start_steps: int = 1500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.target_refresh < 1 or self.gradient_steps < 0:
            raise ValueError("bad step counts")


@dataclass(frozen=True)
class ValueFunction:
    spec: MLPSpec
    theta: np.ndarray

    def __call__(self, states) -> np.ndarray:
        return forward(self.spec, self.theta, np.atleast_2d(states))[:, 0]


@dataclass
class TrainedBundle:
    policy: Policy
    v: ValueFunction
    q: QFunction
    losses: dict = field(default_factory=dict)  # name -> (steps,) array
    low_support: bool = False
    config: IqlConfig | None = None

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(x)) for x in
                   [self.policy.theta, self.v.theta, self.q.theta, *self.losses.values()])


def _check(name, value, step):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{name} loss became non-finite at step {step}")


def train_iql(D: Dataset, weights: WeightTable | None = None, config: IqlConfig = IqlConfig(),
              init_policy: Policy | None = None, lambda_range: tuple[float, float] | None = None) -> TrainedBundle:
    """Alternate expectile V, TD Q and AWR policy updates on weighted minibatches.

    ``init_policy`` warm-starts the actor (typically the data-collecting policy);
    otherwise it is initialised at random over ``lambda_range``.
    """
    if len(D) == 0:
        raise ValueError("cannot train on an empty dataset")
    weights = weights if weights is not None else WeightTable.uniform(D)
    low_support = weights.effective_support() < 2.0
    if low_support:
        log.warning("weight table concentrates on %.3g transitions; policy is fit on very little data",
                    weights.effective_support())
    f = D.flat()
    S, A, R, S2, done = f["s"], f["a"], f["r"] * config.reward_scale, f["s_next"], f["done"]
    SA = np.column_stack([S, A])
    sm, ss = standardizer(np.concatenate([S, S2]))
    am, as_ = standardizer(A[:, None])
    xm, xs = np.append(sm, am), np.append(ss, as_)
    Sn, S2n, SAn = (S - sm) / ss, (S2 - sm) / ss, (SA - xm) / xs
    G = returns_to_go(D.rewards * config.reward_scale, config.gamma).ravel()
    c = float(np.abs(G).mean()) or 1.0  # critic works on values of order one
    r_n, G_n = R / c, G / c

    rng = np.random.default_rng(config.seed)
    q_spec, v_spec = mlp(4, 1, config.hidden), mlp(3, 1, config.hidden)
    if init_policy is not None:
        pi_spec = init_policy.spec
        # the actor sees normalised states; undo that on its first layer
        th_pi = fold_input_scaling(pi_spec, init_policy.theta, -sm / ss, 1.0 / ss)
    else:
        if lambda_range is None:
            raise ValueError("lambda_range is required without an initial policy")
        pi_spec = mlp(3, 1, config.hidden, out_range=lambda_range)
        th_pi = init_params(pi_spec, rng)
    th_q, th_v = init_params(q_spec, rng), init_params(v_spec, rng)
    if config.warm_start_steps:
        wc = TrainConfig(1e-3, config.batch_size, config.warm_start_steps, seed=config.seed)
        th_q = train_regression(q_spec, SAn, G_n, wc, normalize=False)
        th_v = train_regression(v_spec, Sn, G_n, wc, normalize=False)
    th_qt = th_q.copy()

    opt_q, opt_v, opt_pi = (Adam(s.n_params, config.step_size) for s in (q_spec, v_spec, pi_spec))
    sampler = WeightedSampler(D, weights, seed=config.seed)
    bs = config.batch_size
    losses = {k: np.empty(config.gradient_steps) for k in ("v", "q", "pi")}
    for step in range(config.gradient_steps):
        if step and step % config.target_refresh == 0:
            th_qt = th_q.copy()
        idx = sampler.sample(bs)
        q_t = forward(q_spec, th_qt, SAn[idx])
        # V: upper expectile of the target critic
        v_pred, cache = forward_cache(v_spec, th_v, Sn[idx])
        lv, dout = loss_and_dout("expectile", v_pred, q_t, tau=config.tau)
        opt_v.step(th_v, backward(v_spec, th_v, cache, dout))
        # Q: one-step TD onto V(s')
        y = r_n[idx] + config.gamma * (1.0 - done[idx]) * forward(v_spec, th_v, S2n[idx])[:, 0]
        q_pred, cache = forward_cache(q_spec, th_q, SAn[idx])
        lq, dout = loss_and_dout("squared", q_pred, y[:, None])
        opt_q.step(th_q, backward(q_spec, th_q, cache, dout))
        # policy: advantage-weighted regression onto dataset actions
        adv = (q_t[:, 0] - forward(v_spec, th_v, Sn[idx])[:, 0]) * c
        w = np.exp(np.minimum(config.beta * adv, np.log(config.weight_clip)))
        a_pred, cache = forward_cache(pi_spec, th_pi, Sn[idx])
        lp, dout = loss_and_dout("squared", a_pred, A[idx][:, None], weights=w[:, None])
        opt_pi.step(th_pi, backward(pi_spec, th_pi, cache, dout))
        for k, val in (("v", lv), ("q", lq), ("pi", lp)):
            _check(k, val, step)
            losses[k][step] = val

    q_raw = fold_input_scaling(q_spec, fold_output_scaling(q_spec, th_q, 0.0, c / config.reward_scale), xm, xs)
    v_raw = fold_input_scaling(v_spec, fold_output_scaling(v_spec, th_v, 0.0, c / config.reward_scale), sm, ss)
    pi_raw = fold_input_scaling(pi_spec, th_pi, sm, ss)
    bundle = TrainedBundle(Policy(pi_spec, pi_raw), ValueFunction(v_spec, v_raw), QFunction(q_spec, q_raw),
                           losses, low_support, config)
    if not bundle.all_finite():
        raise TrainingDiverged("non-finite parameters after training")
    return bundle


def evaluate_policy(policy, config: WorldConfig, episodes: int = 2000, seed_offset: int = 0) -> tuple[float, float]:
    """Noise-free mean return and its standard error over seeded episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    ctl = policy if isinstance(policy, Controller) else PolicyController(policy)
    ret = rollout(config, np.arange(seed_offset, seed_offset + episodes), ctl).returns
    se = float(ret.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(ret.mean()), se


# --- persistence -----------------------------------------------------------


def save_bundle(bundle: TrainedBundle, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_params(d / "policy.params", bundle.policy.spec, bundle.policy.theta)
    save_params(d / "v.params", bundle.v.spec, bundle.v.theta)
    save_params(d / "q.params", bundle.q.spec, bundle.q.theta)
    manifest = {
        "files": {"policy": "policy.params", "v": "v.params", "q": "q.params"},
        "policy_hash": bundle.policy.theta_hash(),
        "low_support": bundle.low_support,
        "config": asdict(bundle.config) if bundle.config else None,
        "final_losses": {k: float(v[-1]) if len(v) else None for k, v in bundle.losses.items()},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def load_bundle(directory: str | Path) -> TrainedBundle:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    files = manifest["files"]
    pi = Policy(*load_params(d / files["policy"]))
    v = ValueFunction(*load_params(d / files["v"]))
    q = QFunction(*load_params(d / files["q"]))
    cfg = manifest.get("config")
    if cfg:
        cfg["hidden"] = tuple(cfg["hidden"])
    return TrainedBundle(pi, v, q, {}, manifest["low_support"], IqlConfig(**cfg) if cfg else None)
