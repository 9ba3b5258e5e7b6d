"""Controlled comparisons around the exploration and weighting components.

Every recipe starts from the same distilled pacing policy, collects one
dataset per (setting, seed), trains with IQL, and evaluates the trained
policy on a fixed set of evaluation episodes shared by all settings.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest, spearmanr

from . import __version__
from .data import Dataset, WeightTable
from .env import WorldConfig, rollout
from .iql import evaluate_policy, train_iql
from .orchestrator import EVAL_OFFSET, RunConfig, RunState, collect, config_hash, init_state
from .policy import NoiseConfig, make_controller, match_mean_sigma
from .seas import FixedRangeController, SafePolicySet
from .weighting import compute_weights

IMPRESSION_LEVELS = ((175, 175), (144, 206), (113, 237), (82, 268), (50, 300))


@dataclass
class AblationReport:
    name: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, **row):
        self.rows.append(row)

    def to_csv(self, path: str | Path) -> None:
        if not self.rows:
            return
        keys = list(self.rows[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})

    def column(self, key, **where) -> np.ndarray:
        return np.array([r[key] for r in self.rows if all(r[k] == v for k, v in where.items())], dtype=float)


def _stamp(config: RunConfig) -> dict:
    return {"config_hash": config_hash(config), "code_version": __version__}


def _collect_ids(seed: int, slot: int, n: int) -> np.ndarray:
    # disjoint episode ranges per (seed, setting); evaluation lives far above
    return (1 + seed) * 1_000_000 + slot * 10_000 + np.arange(n)


def train_on(D: Dataset, mode: str, config: RunConfig, state: RunState, seed: int):
    """Weight ``D`` ("robust", "raw" or "uniform"), train, return the bundle."""
    if mode == "uniform":
        W = WeightTable.uniform(D)
    else:
        W, _ = compute_weights(D, dataclasses.replace(config.weighting, alpha=config.alpha, gamma=config.gamma,
                                                      returns=mode))
    iql = dataclasses.replace(config.iql, gamma=config.gamma, seed=seed)
    return train_iql(D, W, iql, init_policy=state.policy)


def _evaluate(policy, world: WorldConfig, config: RunConfig):
    return evaluate_policy(policy, world, config.eval_episodes, EVAL_OFFSET)


def _prepare(config: RunConfig, state: RunState | None) -> RunState:
    return state if state is not None else init_state(config)


# --- noise sweep -------------------------------------------------------------


def ablation_noise_sweep(config: RunConfig, sigmas=(0.0, 0.5, 1.0, 2.0, 4.0), kind: str = "asn",
                         seeds=(0, 1, 2), state: RunState | None = None, out: str | Path | None = None):
    """Collect with action noise at each sigma, train with uniform weights."""
    state = _prepare(config, state)
    rep = AblationReport("noise_sweep")
    base, base_se = state.base, 0.0
    for seed in seeds:
        for j, sig in enumerate(sigmas):
            D, _ = collect(state.policy, NoiseConfig(kind, sig, seed), config.world,
                           _collect_ids(seed, j, config.episodes))
            ret = D.returns()
            b = train_on(D, "uniform", config, state, seed)
            m, se = _evaluate(b.policy, config.world, config)
            rep.add(seed=seed, sigma=sig, explore_mean=float(ret.mean()),
                    explore_se=float(ret.std(ddof=1) / np.sqrt(len(ret))), trained_mean=m, trained_se=se,
                    base=base, **_stamp(config))
    rep.summary = noise_sweep_summary(rep, sigmas)
    if out is not None:
        rep.to_csv(Path(out) / "noise_sweep.csv")
    return rep


def _paired_se(a: np.ndarray, b: np.ndarray, se_a: np.ndarray, se_b: np.ndarray) -> float:
    """SE of mean(a - b) over seeds: between-seed spread plus evaluation noise."""
    n = len(a)
    between = np.var(a - b, ddof=1) / n if n > 1 else 0.0
    within = (np.sum(se_a ** 2) + np.sum(se_b ** 2)) / n ** 2
    return float(np.sqrt(between + within))


def noise_sweep_summary(rep: AblationReport, sigmas) -> dict:
    means = {s: float(rep.column("trained_mean", sigma=s).mean()) for s in sigmas}
    lo, hi = sigmas[0], sigmas[-1]
    best = None
    for s in sigmas[1:-1]:
        a, se_a = rep.column("trained_mean", sigma=s), rep.column("trained_se", sigma=s)
        margins = []
        for ext in (lo, hi):
            b, se_b = rep.column("trained_mean", sigma=ext), rep.column("trained_se", sigma=ext)
            margins.append((float((a - b).mean()), _paired_se(a, b, se_a, se_b)))
        ok = all(d >= 2 * se for d, se in margins)
        if best is None or means[s] > means[best[0]]:
            best = (s, ok, margins)
    explore = {s: float(rep.column("explore_mean", sigma=s).mean()) for s in sigmas}
    return {"trained": means, "explore": explore, "peak_sigma": best[0], "peak_ok": best[1],
            "peak_margins": best[2]}


# --- return dispersion at matched mean --------------------------------------


def ablation_dispersion(config: RunConfig, psn_sigma: float = 0.2, asn_bracket=(0.0, 6.0), seeds=(0, 1, 2, 3, 4),
                        state: RunState | None = None, out: str | Path | None = None):
    """Spread of dataset returns under PSN and under ASN tuned to the same mean return.

    Per seed the PSN dataset is collected first and ASN sigma is bisected on the
    same episode ids. The summary reports a one-sided sign test over seeds for
    both the standard deviation and the 95th percentile.
    """
    state = _prepare(config, state)
    rep = AblationReport("dispersion")
    for seed in seeds:
        ids = _collect_ids(seed, 0, config.episodes)
        psn = collect(state.policy, NoiseConfig("psn", psn_sigma, seed), config.world, ids)[0].returns()
        asn_sigma, _ = match_mean_sigma(state.policy, config.world, float(psn.mean()), "asn", asn_bracket,
                                        episodes=config.episodes, seed=seed, episode_offset=int(ids[0]))
        asn = collect(state.policy, NoiseConfig("asn", asn_sigma, seed), config.world, ids)[0].returns()
        rep.add(seed=seed, psn_sigma=psn_sigma, asn_sigma=asn_sigma, psn_mean=float(psn.mean()),
                asn_mean=float(asn.mean()), mean_gap=float(asn.mean() / psn.mean() - 1.0),
                psn_std=float(psn.std(ddof=1)), asn_std=float(asn.std(ddof=1)),
                psn_p95=float(np.percentile(psn, 95)), asn_p95=float(np.percentile(asn, 95)), **_stamp(config))
    summary = {"max_mean_gap": float(np.abs(rep.column("mean_gap")).max())}
    for stat in ("std", "p95"):
        wins = int(np.sum(rep.column(f"psn_{stat}") > rep.column(f"asn_{stat}")))
        summary[f"{stat}_wins"] = wins
        summary[f"{stat}_pvalue"] = float(binomtest(wins, len(seeds), 0.5, alternative="greater").pvalue)
    rep.summary = summary
    if out is not None:
        rep.to_csv(Path(out) / "dispersion.csv")
    return rep


# --- TEE matrix ----------------------------------------------------------------


TEE_SETTINGS = {
    "TEE": ("psn", "robust"),
    "w/o T-explore": ("asn", "robust"),
    "w/o T-exploit": ("psn", "uniform"),
    "w/o TEE": ("asn", "uniform"),
}


def ablation_tee_matrix(config: RunConfig, psn_sigma: float = 0.2, asn_bracket=(0.0, 6.0),
                        budgets=(1500.0, 2000.0, 2500.0, 3000.0), seeds=(0, 1, 2),
                        state: RunState | None = None, out: str | Path | None = None):
    """Four settings at matched mean exploration return, evaluated per budget level."""
    state = _prepare(config, state)
    rep = AblationReport("tee_matrix")
    worlds = {B: dataclasses.replace(config.world, learner_budget=B) for B in budgets}
    base = {B: _evaluate(state.policy, w, config)[0] for B, w in worlds.items()}
    matched = {}
    for seed in seeds:
        ids = _collect_ids(seed, 0, config.episodes)
        psn_D, _ = collect(state.policy, NoiseConfig("psn", psn_sigma, seed), config.world, ids)
        target = float(psn_D.returns().mean())
        asn_sigma, _ = match_mean_sigma(state.policy, config.world, target, "asn", asn_bracket,
                                        episodes=config.episodes, seed=seed, episode_offset=int(ids[0]))
        asn_D, _ = collect(state.policy, NoiseConfig("asn", asn_sigma, seed), config.world, ids)
        matched[seed] = (psn_sigma, asn_sigma, target, float(asn_D.returns().mean()))
        data = {"psn": psn_D, "asn": asn_D}
        for name, (kind, mode) in TEE_SETTINGS.items():
            b = train_on(data[kind], mode, config, state, seed)
            for B, w in worlds.items():
                m, se = _evaluate(b.policy, w, config)
                rep.add(seed=seed, setting=name, budget=B, trained_mean=m, trained_se=se, base=base[B],
                        improvement=m / base[B] - 1.0, sigma=psn_sigma if kind == "psn" else asn_sigma,
                        explore_mean=float(data[kind].returns().mean()), **_stamp(config))
    rep.summary = {
        "improvement": {name: float(rep.column("improvement", setting=name).mean()) for name in TEE_SETTINGS},
        "matched": matched,
    }
    if out is not None:
        rep.to_csv(Path(out) / "tee_matrix.csv")
    return rep


# --- reward-model ablation under stochastic impression counts -------------------


def ablation_stochasticity(config: RunConfig, levels=IMPRESSION_LEVELS, psn_sigma: float = 0.2,
                           seeds=(0, 1, 2), out: str | Path | None = None):
    """Robust (reward-model) versus raw-return weighting as impression counts get noisier."""
    rep = AblationReport("stochasticity")
    for li, level in enumerate(levels):
        cfg = config.replace(world=dataclasses.replace(config.world, impressions_per_step=tuple(level)))
        state = init_state(cfg)
        for seed in seeds:
            D, _ = collect(state.policy, NoiseConfig("psn", psn_sigma, seed), cfg.world,
                           _collect_ids(seed, li, cfg.episodes))
            res = {}
            for mode in ("robust", "raw"):
                res[mode] = _evaluate(train_on(D, mode, cfg, state, seed).policy, cfg.world, cfg)
            rep.add(seed=seed, level=li, impressions_lo=level[0], impressions_hi=level[1], base=state.base,
                    robust=res["robust"][0], robust_se=res["robust"][1], raw=res["raw"][0], raw_se=res["raw"][1],
                    robust_over_raw=res["robust"][0] / res["raw"][0], raw_over_base=res["raw"][0] / state.base,
                    **_stamp(cfg))
    ratios = [(r["level"], r["robust_over_raw"]) for r in rep.rows]
    rep.summary = {
        "robust_over_raw": {li: float(rep.column("robust_over_raw", level=li).mean()) for li in range(len(levels))},
        "spearman": spearman(*map(np.array, zip(*ratios))),
    }
    if out is not None:
        rep.to_csv(Path(out) / "stochasticity.csv")
    return rep


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    return float(spearmanr(x, y).statistic)


# --- safety baselines ----------------------------------------------------------


def ablation_safety_baselines(config: RunConfig, psn_sigma: float = 0.2, epsilon: float = 0.05,
                              small_sigma: float = 0.01, xi: float = 0.1,
                              eps_grid=(0.4, 0.3, 0.2, 0.1, 0.05, 0.01), sweep_episodes: int = 2000,
                              seeds=(0, 1, 2), state: RunState | None = None, out: str | Path | None = None):
    """SEAS against small noise, fixed-range clipping and no constraint; plus the epsilon sweep."""
    state = _prepare(config, state)
    rep = AblationReport("safety_baselines")
    safe = state.safe_set(config.replace(epsilon=epsilon, history=1))
    for seed in seeds:
        ids = _collect_ids(seed, 0, config.episodes)
        psn = NoiseConfig("psn", psn_sigma, seed)
        settings = {
            "SEAS": collect(state.policy, psn, config.world, ids, safe)[0],
            "Small noise": collect(state.policy, NoiseConfig("psn", small_sigma, seed), config.world, ids)[0],
            "Fixed range": _fixed_range(state, psn, xi, config.world, ids),
            "No constraint": collect(state.policy, psn, config.world, ids)[0],
        }
        for name, D in settings.items():
            ret = D.returns()
            m, se = _evaluate(train_on(D, "robust", config, state, seed).policy, config.world, config)
            rep.add(seed=seed, setting=name, explore_mean=float(ret.mean()),
                    margin=1.0 - float(ret.mean()) / state.j_s, trained_mean=m, trained_se=se, base=state.base,
                    **_stamp(config))
    sweep = []
    for eps in eps_grid:
        s = SafePolicySet(safe.policies, safe.qs, state.j_s, eps)
        ids = 5_000_000 + np.arange(sweep_episodes)
        D, trace = collect(state.policy, NoiseConfig("psn", psn_sigma, config.seed), config.world, ids, s)
        ret = D.returns()
        se = float(ret.std(ddof=1) / np.sqrt(len(ret)))
        sweep.append({"epsilon": eps, "one_minus_ratio": 1.0 - float(ret.mean()) / state.j_s,
                      "two_se": 2 * se / state.j_s, "explore_rate": trace.explore_rate})
    rep.summary = {
        "trained": {n: float(rep.column("trained_mean", setting=n).mean())
                    for n in ("SEAS", "Small noise", "Fixed range", "No constraint")},
        "margin": {n: float(rep.column("margin", setting=n).mean())
                   for n in ("SEAS", "Small noise", "Fixed range", "No constraint")},
        "epsilon_sweep": sweep,
        "j_s": state.j_s,
    }
    if out is not None:
        rep.to_csv(Path(out) / "safety_baselines.csv")
        with open(Path(out) / "epsilon_sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(sweep[0]))
            w.writeheader()
            w.writerows(sweep)
    return rep


def _fixed_range(state: RunState, noise: NoiseConfig, xi: float, world: WorldConfig, ids) -> Dataset:
    ro = rollout(world, ids, FixedRangeController(make_controller(state.policy, noise), state.policy, xi))
    return Dataset.from_rollouts(ro, "psn+fixed_range", noise.sigma)
