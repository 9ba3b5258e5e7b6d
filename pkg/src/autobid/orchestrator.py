"""Iterative offline RL loop: explore safely, weight, train, repeat."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, save as save_dataset
from .env import WorldConfig, desk_config, rollout
from .iql import IqlConfig, TrainingDiverged, evaluate_policy, save_bundle, train_iql
from .nn import TrainConfig, mlp, train_regression
from .policy import ASNController, NoiseConfig, Policy, PSNController, make_controller
from .seas import SafePolicySet, SarsaConfig, SeasController, estimate_Js, fit_q_sarsa
from .weighting import WeightingConfig, compute_weights

log = logging.getLogger(__name__)

EVAL_OFFSET = 10_000_000     # evaluation episodes never overlap collection episodes
JS_OFFSET = 20_000_000
CALIB_OFFSET = 30_000_000


class UnsafeCollection(RuntimeError):
    """Exploration requested without SEAS while safety is configured."""


@dataclass(frozen=True)
class HeuristicConfig:
    # lambda = anchor * exp(gain * (consumed_frac - time_frac)); anchor None = middle of lambda_range
    anchor: float | None = None
    gain: float = 2.0
    distill_steps: int = 6000
    distill_points: int = 20000


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=desk_config)
    iterations: int = 5
    transitions: int = 20_000
    noise: NoiseConfig = NoiseConfig("psn", 0.1)
    alpha: float = 0.1
    epsilon: float = 0.05
    gamma: float = 1.0
    history: int = 3
    safety: bool = True
    heuristic: HeuristicConfig = HeuristicConfig()
    # the initial safe policy's Q is fit on its own data, collected with small action noise
    calibration_noise: NoiseConfig = NoiseConfig("asn", 0.3)
    eval_episodes: int = 2000
    js_episodes: int = 2000
    weighting: WeightingConfig = WeightingConfig()
    iql: IqlConfig = IqlConfig(reward_scale=0.1)
    sarsa: SarsaConfig = SarsaConfig()
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.history < 1:
            raise ValueError("history depth must be >= 1")
        if self.transitions < self.world.episode_steps:
            raise ValueError("transitions must cover at least one episode")

    @property
    def episodes(self) -> int:
        return self.transitions // self.world.episode_steps

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def full_profile(**overrides) -> RunConfig:
    """Full-size environment: 30 advertisers, 96 steps, 100 000 transitions per iteration."""
    world = desk_config(num_advertisers=30, episode_steps=96)
    return RunConfig(world=world, transitions=100_000, **overrides)


def config_dict(config) -> dict:
    return json.loads(json.dumps(asdict(config), default=list))


def config_hash(config) -> str:
    blob = json.dumps(config_dict(config), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


# --- initial safe policy ---------------------------------------------------


def pacing_rule(states: np.ndarray, lambda_range, anchor=None, gain=2.0) -> np.ndarray:
    """Raise lambda (shade bids) when spend runs ahead of time, lower it when behind."""
    lo, hi = lambda_range
    anchor = 0.5 * (lo + hi) if anchor is None else anchor
    s = np.atleast_2d(states)
    return np.clip(anchor * np.exp(gain * (s[:, 1] - s[:, 0])), lo, hi)


def initial_safe_policy(config: RunConfig):
    """Distil the pacing rule into a policy network. Returns ``(policy, max_fit_error_fraction)``."""
    h, world = config.heuristic, config.world
    rng = np.random.default_rng([config.seed, 7])
    S = rng.uniform(0.0, 1.0, size=(h.distill_points, 3))
    S[:, 2] *= world.budget_range[1] / world.budget_scale
    y = pacing_rule(S, world.lambda_range, h.anchor, h.gain)
    spec = mlp(3, 1, (64, 64), out_range=world.lambda_range)
    theta = train_regression(spec, S, y, TrainConfig(1e-3, 256, h.distill_steps, seed=config.seed))
    policy = Policy(spec, theta)
    err = distillation_error(policy, config)
    if err > 0.05:
        log.warning("distilled pacing policy deviates by %.1f%% of the action range", 100 * err)
    return policy, err


def distillation_error(policy: Policy, config: RunConfig, n: int = 11) -> float:
    g = np.linspace(0.0, 1.0, n)
    b = np.linspace(0.0, config.world.budget_range[1] / config.world.budget_scale, n)
    grid = np.array(np.meshgrid(g, g, b)).reshape(3, -1).T
    lo, hi = config.world.lambda_range
    ref = pacing_rule(grid, (lo, hi), config.heuristic.anchor, config.heuristic.gain)
    return float(np.max(np.abs(policy(grid) - ref)) / (hi - lo))


# --- collection ------------------------------------------------------------


def collect(policy: Policy, noise: NoiseConfig, world: WorldConfig, episode_ids, safe: SafePolicySet | None = None,
            require_safety: bool = False):
    """Deploy ``policy`` with exploration noise, optionally behind SEAS.

    Returns ``(Dataset, SeasTrace or None)``. Each trajectory's ``noise_kind`` ends in
    ``+seas`` when SEAS was active.
    """
    if require_safety and noise.kind != "none" and safe is None:
        raise UnsafeCollection("exploration requires a SafePolicySet when safety is configured")
    base = make_controller(policy, noise)
    ctl = SeasController(base, safe, world.lambda_range) if safe is not None else base
    ids = np.asarray(episode_ids)
    ro = rollout(world, ids, ctl)
    hashes = [base.hashes[int(e)] for e in ids] if isinstance(base, PSNController) else [policy.theta_hash()] * len(ids)
    kind = noise.kind + ("+seas" if safe is not None else "")
    D = Dataset.from_rollouts(ro, kind, noise.sigma, hashes)
    return D, (ctl.trace() if safe is not None else None)


def seas_active(D: Dataset) -> np.ndarray:
    return np.array([k.endswith("+seas") for k in D.noise_kind])


# --- iteration state and reports -------------------------------------------


@dataclass
class SafeMember:
    policy: Policy
    q: object
    j: float
    label: str


@dataclass
class RunState:
    policy: Policy                 # pi^k, the exploration centre
    policy_j: float                # its evaluated return
    initial: SafeMember
    recent: list = field(default_factory=list)   # most recent trained safe members
    j_s: float = 0.0
    j_s_se: float = 0.0
    best: float = -np.inf
    base: float = 0.0

    def safe_set(self, config: RunConfig) -> SafePolicySet:
        members = [self.initial] + self.recent[-(config.history - 1):] if config.history > 1 else [self.initial]
        return SafePolicySet([m.policy for m in members], [m.q for m in members], self.j_s, config.epsilon)


@dataclass
class IterationReport:
    iteration: int
    status: str
    exploration_mean: float
    exploration_se: float
    j_s: float
    threshold: float
    safety_ok: bool
    trained_mean: float
    trained_se: float
    best_so_far: float
    improvement: float          # trained return relative to the initial policy
    adv_min: float
    adv_median: float
    adv_max: float
    effective_support: float
    seas_explore_rate: float
    n_safe: int
    policy_hash: str
    seed: int
    config_hash: str
    code_version: str

    def row(self) -> dict:
        return asdict(self)


def write_report(report: IterationReport, path: Path) -> None:
    """Append one row, written through a temp file so readers never see a partial file."""
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    rows.append({k: _fmt(v) for k, v in report.row().items()})
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(report.row()))
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def init_state(config: RunConfig) -> RunState:
    """Initial safe policy, its J_s estimate and a calibration Q fit on its own data."""
    pi0, _ = initial_safe_policy(config)
    j_s, j_se = estimate_Js(pi0, config.world, config.js_episodes, JS_OFFSET)
    ids = CALIB_OFFSET + np.arange(config.episodes)
    calib, _ = collect(pi0, dataclasses.replace(config.calibration_noise, seed=config.seed), config.world, ids)
    q0 = fit_q_sarsa(calib, config.gamma, dataclasses.replace(config.sarsa, gamma=config.gamma, seed=config.seed))
    base, _ = evaluate_policy(pi0, config.world, config.eval_episodes, EVAL_OFFSET)
    member = SafeMember(pi0, q0, j_s, "initial")
    return RunState(pi0, base, member, [], j_s, j_se, base, base)


def run_iteration(k: int, state: RunState, config: RunConfig, out: Path | None = None):
    """One collect / weight / train cycle. Returns ``(next policy, IterationReport)``."""
    seed = config.seed
    safe = state.safe_set(config) if config.safety else None
    noise = dataclasses.replace(config.noise, seed=seed * 1000 + k)
    ids = k * 1_000_000 + np.arange(config.episodes)
    D, trace = collect(state.policy, noise, config.world, ids, safe, require_safety=config.safety)
    ret = D.returns(1.0)
    ex_mean, ex_se = float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(len(ret)))
    threshold = (1.0 - config.epsilon) * state.j_s
    safety_ok = ex_mean >= threshold - 2.0 * ex_se
    W, qv = compute_weights(D, dataclasses.replace(config.weighting, alpha=config.alpha, gamma=config.gamma,
                                                   reward_train=dataclasses.replace(config.weighting.reward_train,
                                                                                    seed=seed + k),
                                                   value_train=dataclasses.replace(config.weighting.value_train,
                                                                                   seed=seed + k)))
    status = "ok"
    new_policy, trained_mean, trained_se = state.policy, state.policy_j, 0.0
    try:
        bundle = train_iql(D, W, dataclasses.replace(config.iql, gamma=config.gamma, seed=seed * 1000 + k),
                           init_policy=state.policy)
        new_policy = bundle.policy
        trained_mean, trained_se = evaluate_policy(new_policy, config.world, config.eval_episodes, EVAL_OFFSET)
    except TrainingDiverged as exc:
        status = f"aborted: {exc}"
        bundle = None
    if config.safety and not safety_ok:
        status = "aborted: exploration fell below the safety threshold"
        new_policy, trained_mean = state.policy, state.policy_j
    # the policy that explored this round becomes a safe candidate, with Q from its own round
    if config.safety and k > 1 and state.policy_j >= state.j_s:
        q = fit_q_sarsa(D, config.gamma, dataclasses.replace(config.sarsa, gamma=config.gamma, seed=seed + k))
        state.recent.append(SafeMember(state.policy, q, state.policy_j, f"iteration {k}"))
        state.recent = state.recent[-max(config.history - 1, 0):] if config.history > 1 else []
    state.best = max(state.best, trained_mean)
    adv = qv.advantage
    report = IterationReport(
        iteration=k, status=status, exploration_mean=ex_mean, exploration_se=ex_se, j_s=state.j_s,
        threshold=threshold, safety_ok=bool(safety_ok), trained_mean=trained_mean, trained_se=trained_se,
        best_so_far=state.best, improvement=trained_mean / state.base - 1.0,
        adv_min=float(adv.min()), adv_median=float(np.median(adv)), adv_max=float(adv.max()),
        effective_support=W.effective_support(),
        seas_explore_rate=trace.explore_rate if trace is not None else 1.0,
        n_safe=len(safe) if safe is not None else 0, policy_hash=new_policy.theta_hash(),
        seed=seed, config_hash=config_hash(config), code_version=__version__,
    )
    if out is not None:
        d = Path(out) / f"iter_{k:02d}"
        d.mkdir(parents=True, exist_ok=True)
        save_dataset(D, d / "dataset.csv")
        W.to_csv(D, d / "weights.csv")
        if trace is not None:
            trace.to_csv(d / "seas_trace_episode0.csv")
        if bundle is not None:
            save_bundle(bundle, d / "bundle")
        write_report(report, Path(out) / "iterations.csv")
    state.policy, state.policy_j = new_policy, trained_mean
    return new_policy, report


def run(config: RunConfig, out: str | Path | None = None) -> list[IterationReport]:
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(
            {"config": config_dict(config), "config_hash": config_hash(config), "code_version": __version__},
            indent=2))
        if (out / "iterations.csv").exists():
            (out / "iterations.csv").unlink()
    state = init_state(config)
    log.info("initial policy: J_s=%.1f (SE %.1f), evaluated %.1f", state.j_s, state.j_s_se, state.base)
    reports = []
    for k in range(1, config.iterations + 1):
        _, rep = run_iteration(k, state, config, out)
        log.info("iteration %d: explore %.1f thr %.1f trained %.1f (%+.2f%%) %s", k, rep.exploration_mean,
                 rep.threshold, rep.trained_mean, 100 * rep.improvement, rep.status)
        reports.append(rep)
    return reports
