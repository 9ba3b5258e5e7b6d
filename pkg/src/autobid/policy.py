"""Deterministic bidding policies and the two exploration schemes.

PSN perturbs the policy's parameters once per episode (factorised Gaussian,
one noise vector per layer input and output). ASN adds fresh Gaussian noise
to every action.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .env import Controller, State, WorldConfig, rollout
from .nn import MLPSpec, forward, mlp, unpack


class BracketError(RuntimeError):
    """The requested mean return is not inside the searched sigma bracket."""


@dataclass(frozen=True)
class Policy:
    spec: MLPSpec
    theta: np.ndarray

    def __post_init__(self):
        if self.spec.output != "squash":
            raise ValueError("policy networks must squash into the lambda range")
        th = np.array(self.theta, dtype=float)
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    @classmethod
    def zeros(cls, lambda_range, hidden=(64, 64)) -> "Policy":
        spec = mlp(3, 1, hidden, out_range=lambda_range)
        return cls(spec, np.zeros(spec.n_params))

    @property
    def lambda_range(self) -> tuple[float, float]:
        return self.spec.out_range

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return forward(self.spec, self.theta, np.atleast_2d(states))[:, 0]

    def theta_hash(self) -> str:
        return theta_hash(self.theta)


def theta_hash(theta: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()[:16]


def _state_array(s) -> np.ndarray:
    return s.as_array() if isinstance(s, State) else np.asarray(s, dtype=float)


def act(policy: Policy, s) -> float | np.ndarray:
    """Lambda for one state (returns a float) or a batch of states."""
    x = _state_array(s)
    out = policy(x)
    return float(out[0]) if x.ndim == 1 else out


def _f(x):
    return np.sign(x) * np.sqrt(np.abs(x))


def psn_noise(spec: MLPSpec, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """One factorised-Gaussian parameter perturbation."""
    noise = np.zeros(spec.n_params)
    for W, b in unpack(spec, noise):
        q, p = W.shape
        f_in = _f(rng.standard_normal(p))
        f_out = _f(rng.standard_normal(q))
        W[...] = sigma * np.outer(f_out, f_in)
        b[...] = sigma * f_out
    return noise


def psn_sample(policy: Policy, sigma: float, rng: np.random.Generator) -> Policy:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Policy(policy.spec, policy.theta.copy())
    return Policy(policy.spec, policy.theta + psn_noise(policy.spec, sigma, rng))


def asn_act(policy: Policy, s, sigma: float, rng: np.random.Generator):
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    base = act(policy, s)
    if sigma == 0:
        return base
    lo, hi = policy.lambda_range
    noisy = np.asarray(base) + sigma * rng.standard_normal(np.shape(base))
    out = np.clip(noisy, lo, hi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "none"  # "psn", "asn" or "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("psn", "asn", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


# --- rollout controllers ---------------------------------------------------


def episode_rng(seed: int, episode_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(episode_id), stream])


class PolicyController(Controller):
    """Noise-free actions."""

    def __init__(self, policy: Policy):
        self.policy = policy

    def act(self, states, t):
        return self.policy(states)


class PSNController(Controller):
    """Each episode acts with its own perturbed copy, sampled at reset."""

    def __init__(self, policy: Policy, sigma: float, seed: int = 0):
        self.policy, self.sigma, self.seed = policy, sigma, seed
        self.thetas = None
        self.hashes: dict[int, str] = {}

    def reset(self, n, episode_ids):
        spec = self.policy.spec
        self.thetas = np.stack([
            self.policy.theta + (psn_noise(spec, self.sigma, episode_rng(self.seed, e)) if self.sigma > 0 else 0.0)
            for e in episode_ids
        ])
        for e, th in zip(episode_ids, self.thetas):
            self.hashes[int(e)] = theta_hash(th)

    def act(self, states, t):
        return forward(self.policy.spec, self.thetas, states)[:, 0]


class ASNController(Controller):
    def __init__(self, policy: Policy, sigma: float, seed: int = 0):
        self.policy, self.sigma, self.seed = policy, sigma, seed
        self.rngs = []

    def reset(self, n, episode_ids):
        self.rngs = [episode_rng(self.seed, e, 1) for e in episode_ids]

    def act(self, states, t):
        base = self.policy(states)
        g = np.array([r.standard_normal() for r in self.rngs])
        lo, hi = self.policy.lambda_range
        return np.clip(base + self.sigma * g, lo, hi)


def make_controller(policy: Policy, noise: NoiseConfig) -> Controller:
    if noise.kind == "psn":
        return PSNController(policy, noise.sigma, noise.seed)
    if noise.kind == "asn":
        return ASNController(policy, noise.sigma, noise.seed)
    return PolicyController(policy)


def mean_return(policy: Policy, config: WorldConfig, noise: NoiseConfig, seeds) -> float:
    return float(rollout(config, seeds, make_controller(policy, noise)).returns.mean())


def match_mean_sigma(
    base: Policy,
    config: WorldConfig,
    target_mean_return: float,
    kind: str,
    bracket: tuple[float, float],
    episodes: int = 2000,
    rel_tol: float = 0.01,
    max_iter: int = 30,
    seed: int = 0,
    episode_offset: int = 0,
) -> tuple[float, float]:
    """Bisect sigma so the noisy policy's mean return hits ``target_mean_return``.

    Uses common random numbers (same episode seeds and noise seed for every
    sigma) and assumes mean return decreases with sigma. Returns
    ``(sigma, achieved_mean)``.
    """
    seeds = np.arange(episode_offset, episode_offset + episodes)

    def f(sig):
        return mean_return(base, config, NoiseConfig(kind, sig, seed), seeds)

    lo, hi = bracket
    f_lo, f_hi = f(lo), f(hi)
    tol = rel_tol * abs(target_mean_return)
    for sig, val in ((lo, f_lo), (hi, f_hi)):
        if abs(val - target_mean_return) <= tol:
            return sig, val
    if not (f_hi < target_mean_return < f_lo):
        raise BracketError(
            f"{kind} mean return over sigma in [{lo}, {hi}] spans [{f_hi:.4g}, {f_lo:.4g}], "
            f"target {target_mean_return:.4g} not inside"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val - target_mean_return) <= tol:
            return mid, val
        if val > target_mean_return:
            lo = mid
        else:
            hi = mid
    return mid, val
