"""Trajectory datasets, their CSV format, and weighted transition sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .env import Rollouts, State

FORMAT_TAG = "#autobid-dataset v1"
COLUMNS = [
    "campaign_id", "episode_id", "t",
    "s.time_frac", "s.consumed_frac", "s.budget_left_scaled",
    "a", "r",
    "s_next.time_frac", "s_next.consumed_frac", "s_next.budget_left_scaled",
    "done", "noise_kind", "sigma", "theta_hash",
]


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    campaign_id: int
    episode_id: int
    t: int
    s: State
    a: float
    r: float
    s_next: State
    done: bool


@dataclass(frozen=True)
class Trajectory:
    campaign_id: int
    episode_id: int
    states: np.ndarray       # (T, 3)
    actions: np.ndarray      # (T,)
    rewards: np.ndarray      # (T,)
    next_states: np.ndarray  # (T, 3)
    noise_kind: str = "none"
    sigma: float = 0.0
    theta_hash: str = ""

    def __len__(self):
        return len(self.actions)

    def transitions(self) -> list[Transition]:
        T = len(self)
        return [
            Transition(self.campaign_id, self.episode_id, t, State(*self.states[t]), float(self.actions[t]),
                       float(self.rewards[t]), State(*self.next_states[t]), t == T - 1)
            for t in range(T)
        ]


class Dataset:
    """N trajectories of equal length T, stored column-wise."""

    def __init__(self, campaign_id, episode_id, states, actions, rewards, next_states,
                 noise_kind=None, sigma=None, theta_hash=None):
        self.campaign_id = np.asarray(campaign_id, dtype=np.int64)
        self.episode_id = np.asarray(episode_id, dtype=np.int64)
        self.states = np.asarray(states, dtype=float)
        self.actions = np.asarray(actions, dtype=float)
        self.rewards = np.asarray(rewards, dtype=float)
        self.next_states = np.asarray(next_states, dtype=float)
        N = len(self.episode_id)
        self.noise_kind = list(noise_kind) if noise_kind is not None else ["none"] * N
        self.sigma = np.asarray(sigma if sigma is not None else np.zeros(N), dtype=float)
        self.theta_hash = list(theta_hash) if theta_hash is not None else [""] * N
        if N and self.states.shape != (N, self.horizon, 3):
            raise ValueError("states must have shape (N, T, 3)")
        for name in ("rewards", "sigma"):
            if len(getattr(self, name)) != N:
                raise ValueError(f"{name} length mismatch")

    @classmethod
    def from_rollouts(cls, ro: Rollouts, noise_kind="none", sigma=0.0, theta_hashes=None,
                      episode_ids=None) -> "Dataset":
        N = len(ro.seeds)
        return cls(
            campaign_id=ro.seeds,
            episode_id=np.arange(N) if episode_ids is None else episode_ids,
            states=ro.states, actions=ro.actions, rewards=ro.rewards, next_states=ro.next_states,
            noise_kind=[noise_kind] * N if isinstance(noise_kind, str) else noise_kind,
            sigma=np.full(N, sigma) if np.ndim(sigma) == 0 else sigma,
            theta_hash=theta_hashes or [""] * N,
        )

    @classmethod
    def empty(cls, horizon: int = 0) -> "Dataset":
        return cls([], [], np.zeros((0, horizon, 3)), np.zeros((0, horizon)), np.zeros((0, horizon)),
                   np.zeros((0, horizon, 3)))

    @property
    def n_trajectories(self) -> int:
        return len(self.episode_id)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1] if self.actions.ndim == 2 else 0

    @property
    def n_transitions(self) -> int:
        return self.actions.size

    def __len__(self):
        return self.n_trajectories

    def __getitem__(self, i) -> Trajectory:
        return Trajectory(int(self.campaign_id[i]), int(self.episode_id[i]), self.states[i], self.actions[i],
                          self.rewards[i], self.next_states[i], self.noise_kind[i], float(self.sigma[i]),
                          self.theta_hash[i])

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        arrays = ("campaign_id", "episode_id", "states", "actions", "rewards", "next_states", "sigma")
        return (all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays)
                and self.noise_kind == other.noise_kind and self.theta_hash == other.theta_hash)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.campaign_id[idx], self.episode_id[idx], self.states[idx], self.actions[idx],
                       self.rewards[idx], self.next_states[idx], [self.noise_kind[i] for i in idx],
                       self.sigma[idx], [self.theta_hash[i] for i in idx])

    def returns(self, gamma: float = 1.0) -> np.ndarray:
        return discounted_sum(self.rewards, gamma)

    def flat(self) -> dict[str, np.ndarray]:
        """Transition arrays, row-major over (trajectory, t)."""
        N, T = self.actions.shape
        done = np.zeros((N, T))
        done[:, -1] = 1.0
        return {
            "s": self.states.reshape(-1, 3),
            "a": self.actions.reshape(-1),
            "r": self.rewards.reshape(-1),
            "s_next": self.next_states.reshape(-1, 3),
            "done": done.reshape(-1),
        }

    def chain_consistent(self) -> bool:
        return bool(np.array_equal(self.next_states[:, :-1], self.states[:, 1:]))


def merge(datasets: list[Dataset]) -> Dataset:
    """Concatenate and sort deterministically by (campaign_id, episode_id)."""
    ds = [d for d in datasets if len(d)]
    if not ds:
        return Dataset.empty(datasets[0].horizon if datasets else 0)
    cat = Dataset(
        np.concatenate([d.campaign_id for d in ds]), np.concatenate([d.episode_id for d in ds]),
        np.concatenate([d.states for d in ds]), np.concatenate([d.actions for d in ds]),
        np.concatenate([d.rewards for d in ds]), np.concatenate([d.next_states for d in ds]),
        sum((d.noise_kind for d in ds), []), np.concatenate([d.sigma for d in ds]),
        sum((d.theta_hash for d in ds), []),
    )
    order = np.lexsort((cat.episode_id, cat.campaign_id))
    return cat.subset(order)


def discounted_sum(rewards: np.ndarray, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=float)
    disc = gamma ** np.arange(rewards.shape[-1])
    return rewards @ disc


def trajectory_return(traj, gamma: float = 1.0) -> float:
    """Sum of gamma**t * r_t over one trajectory (or a plain reward sequence)."""
    rewards = traj.rewards if isinstance(traj, Trajectory) else traj
    return float(discounted_sum(np.asarray(rewards, dtype=float), gamma))


# --- CSV persistence -------------------------------------------------------


def save(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(FORMAT_TAG + "\n")
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        T = dataset.horizon
        for i in range(len(dataset)):
            cid, eid = int(dataset.campaign_id[i]), int(dataset.episode_id[i])
            kind, sig, h = dataset.noise_kind[i], repr(float(dataset.sigma[i])), dataset.theta_hash[i]
            for t in range(T):
                s, sn = dataset.states[i, t], dataset.next_states[i, t]
                w.writerow([
                    cid, eid, t, repr(float(s[0])), repr(float(s[1])), repr(float(s[2])),
                    repr(float(dataset.actions[i, t])), repr(float(dataset.rewards[i, t])),
                    repr(float(sn[0])), repr(float(sn[1])), repr(float(sn[2])),
                    int(t == T - 1), kind, sig, h,
                ])


def load(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\r\n")
        if first != FORMAT_TAG:
            raise DatasetFormatError(f"{path}:1: expected format tag {FORMAT_TAG!r}, got {first!r}")
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}:2: missing column header") from None
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise DatasetFormatError(f"{path}:2: missing column(s) {', '.join(missing)}")
        col = {c: header.index(c) for c in COLUMNS}
        trajs: dict[tuple[int, int], list] = {}
        order = []
        for lineno, row in enumerate(reader, 3):
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            parsed = {}
            for c in COLUMNS:
                raw = row[col[c]]
                try:
                    if c in ("campaign_id", "episode_id", "t", "done"):
                        parsed[c] = int(raw)
                    elif c in ("noise_kind", "theta_hash"):
                        parsed[c] = raw
                    else:
                        parsed[c] = float(raw)
                except ValueError:
                    raise DatasetFormatError(f"{path}:{lineno}: bad value {raw!r} in field {c}") from None
            key = (parsed["campaign_id"], parsed["episode_id"])
            if key not in trajs:
                trajs[key] = []
                order.append(key)
            rows = trajs[key]
            if parsed["t"] != len(rows):
                raise DatasetFormatError(f"{path}:{lineno}: field t={parsed['t']} breaks contiguity of episode {key}")
            rows.append(parsed)
    if not order:
        return Dataset.empty()
    T = len(trajs[order[0]])
    for key in order:
        if len(trajs[key]) != T:
            raise DatasetFormatError(f"{path}: episode {key} has {len(trajs[key])} steps, expected {T}")
    N = len(order)
    states = np.empty((N, T, 3))
    next_states = np.empty((N, T, 3))
    actions = np.empty((N, T))
    rewards = np.empty((N, T))
    for i, key in enumerate(order):
        for t, p in enumerate(trajs[key]):
            states[i, t] = (p["s.time_frac"], p["s.consumed_frac"], p["s.budget_left_scaled"])
            next_states[i, t] = (p["s_next.time_frac"], p["s_next.consumed_frac"], p["s_next.budget_left_scaled"])
            actions[i, t] = p["a"]
            rewards[i, t] = p["r"]
    heads = [trajs[k][0] for k in order]
    return Dataset(
        [k[0] for k in order], [k[1] for k in order], states, actions, rewards, next_states,
        [h["noise_kind"] for h in heads], [h["sigma"] for h in heads], [h["theta_hash"] for h in heads],
    )


# --- weights and sampling --------------------------------------------------


class WeightTable:
    """Per-transition sampling probabilities, shape (N, T), summing to one."""

    def __init__(self, w: np.ndarray):
        w = np.asarray(w, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must have shape (N, T)")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        self.w = w

    @classmethod
    def uniform(cls, dataset: Dataset) -> "WeightTable":
        N, T = dataset.actions.shape
        return cls(np.full((N, T), 1.0 / (N * T)))

    @property
    def shape(self):
        return self.w.shape

    def effective_support(self) -> float:
        """Kish effective sample size of the transition distribution."""
        p = self.w.ravel()
        return float(1.0 / np.sum(p * p))

    def to_csv(self, dataset: Dataset, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode_id", "t", "w"])
            for i in range(self.w.shape[0]):
                for t in range(self.w.shape[1]):
                    w.writerow([int(dataset.episode_id[i]), t, repr(float(self.w[i, t]))])


class WeightedSampler:
    """I.i.d. categorical draws of flat transition indices."""

    def __init__(self, dataset: Dataset, weights: WeightTable, seed: int = 0):
        if weights.shape != dataset.actions.shape:
            raise ValueError(f"weight table shape {weights.shape} does not match dataset {dataset.actions.shape}")
        self.dataset = dataset
        self.cdf = np.cumsum(weights.w.ravel())
        self.cdf /= self.cdf[-1]
        self.rng = np.random.default_rng(seed)

    def sample(self, n: int) -> np.ndarray:
        idx = np.searchsorted(self.cdf, self.rng.random(n), side="right")
        return np.minimum(idx, len(self.cdf) - 1)

    def __iter__(self) -> Iterator[Transition]:
        T = self.dataset.horizon
        while True:
            k = int(self.sample(1)[0])
            i, t = divmod(k, T)
            yield self.dataset[i].transitions()[t]


def weighted_sampler(dataset: Dataset, weights: WeightTable, seed: int = 0) -> WeightedSampler:
    return WeightedSampler(dataset, weights, seed)
