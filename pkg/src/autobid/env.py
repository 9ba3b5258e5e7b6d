"""Multi-advertiser second-price auction simulator.

The learner is always advertiser 0. Every other advertiser bids ``v / lam`` with
a per-episode ``lam`` fixed at episode start, so from the learner's point of
view the market is stationary within an episode.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np

LEARNER = 0


class EpisodeFinished(RuntimeError):
    """Raised when stepping a world whose episode already ended."""


@dataclass(frozen=True)
class WorldConfig:
    num_advertisers: int = 30
    episode_steps: int = 96
    impressions_per_step: tuple[int, int] = (50, 300)
    budget_range: tuple[float, float] = (1500.0, 3000.0)
    value_range: tuple[float, float] = (0.0, 1.0)
    reserve_price: float = 0.0
    budget_scale: float = 3000.0
    lambda_range: tuple[float, float] = (0.1, 10.0)
    # None means "same as lambda_range"
    opponent_lambda_range: tuple[float, float] | None = None
    # None means the learner's budget is drawn from budget_range like everyone else
    learner_budget: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_advertisers < 1:
            raise ValueError("num_advertisers must be >= 1")
        if self.episode_steps < 1:
            raise ValueError("episode_steps must be >= 1")
        lo, hi = self.impressions_per_step
        if not (0 <= lo <= hi):
            raise ValueError(f"bad impressions_per_step {self.impressions_per_step}")
        for name in ("budget_range", "value_range", "lambda_range"):
            a, b = getattr(self, name)
            if not a <= b:
                raise ValueError(f"empty range {name}={getattr(self, name)}")
        if self.budget_range[0] <= 0:
            raise ValueError("budgets must be positive")
        if self.value_range[0] < 0:
            raise ValueError("impression values must be nonnegative")
        if self.lambda_range[0] <= 0:
            raise ValueError("lambda_range minimum must be > 0")
        if self.opponent_lambda_range is not None:
            a, b = self.opponent_lambda_range
            if not 0 < a <= b:
                raise ValueError("bad opponent_lambda_range")
        if self.reserve_price < 0:
            raise ValueError("reserve_price must be >= 0")
        if self.budget_scale <= 0:
            raise ValueError("budget_scale must be > 0")
        if self.learner_budget is not None and self.learner_budget <= 0:
            raise ValueError("learner_budget must be > 0")

    @property
    def max_impressions(self) -> int:
        return self.impressions_per_step[1]


def desk_config(**overrides) -> WorldConfig:
    """Small profile used for tests and the default experiments.

    Values are drawn from [0, 10] and rival lambdas from [3, 6] so that budgets
    bind and the best constant lambda sits inside the action range.
    """
    base = dict(num_advertisers=8, episode_steps=32, value_range=(0.0, 10.0), opponent_lambda_range=(3.0, 6.0))
    base.update(overrides)
    return WorldConfig(**base)


@dataclass(frozen=True)
class State:
    time_frac: float
    consumed_frac: float
    budget_left_scaled: float

    def as_array(self) -> np.ndarray:
        return np.array([self.time_frac, self.consumed_frac, self.budget_left_scaled])


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    spend: float
    wins: int
    done: bool


@dataclass
class WorldState:
    """One episode. ``values[t, k, j]`` is impression k's value to advertiser j."""

    config: WorldConfig
    t: int
    remaining_budget: np.ndarray
    initial_budget: np.ndarray
    counts: np.ndarray
    values: np.ndarray
    opponent_lambdas: np.ndarray
    seed: int
    # filled by env_step when logging is on: rows (step, impression_index, winner_id, price, value)
    auction_log: list | None = field(default=None, repr=False)

    def state(self) -> State:
        cfg = self.config
        b0 = self.initial_budget[LEARNER]
        bt = self.remaining_budget[LEARNER]
        return State(self.t / cfg.episode_steps, (b0 - bt) / b0, bt / cfg.budget_scale)

    @property
    def done(self) -> bool:
        return self.t >= self.config.episode_steps

    def copy(self) -> "WorldState":
        return replace(
            self,
            remaining_budget=self.remaining_budget.copy(),
            auction_log=None if self.auction_log is None else list(self.auction_log),
        )


def _log_uniform(rng: np.random.Generator, lo: float, hi: float, size) -> np.ndarray:
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size=size))


def init_episode(config: WorldConfig, seed: int, log_auctions: bool = False) -> WorldState:
    """Draw a full episode: impression schedule, values, budgets, opponent lambdas."""
    rng = np.random.default_rng([config.seed, seed])
    T, n = config.episode_steps, config.num_advertisers
    lo, hi = config.impressions_per_step
    counts = rng.integers(lo, hi + 1, size=T)
    v_lo, v_hi = config.value_range
    flat = rng.uniform(v_lo, v_hi, size=(int(counts.sum()), n))
    values = np.zeros((T, hi, n))
    offset = 0
    for t, c in enumerate(counts):
        values[t, :c] = flat[offset:offset + c]
        offset += c
    budgets = rng.uniform(*config.budget_range, size=n)
    if config.learner_budget is not None:
        budgets[LEARNER] = config.learner_budget
    opp_range = config.opponent_lambda_range or config.lambda_range
    opp = _log_uniform(rng, *opp_range, size=n - 1)
    return WorldState(
        config=config,
        t=0,
        remaining_budget=budgets.copy(),
        initial_budget=budgets,
        counts=counts,
        values=values,
        opponent_lambdas=opp,
        seed=seed,
        auction_log=[] if log_auctions else None,
    )


def compute_bid(v: float, lam: float) -> float:
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if v < 0:
        raise ValueError(f"impression value must be nonnegative, got {v}")
    return v / lam


def run_auction(bids: Sequence[tuple[int, float]], reserve: float = 0.0):
    """Second-price auction. Returns ``(winner_id, price)`` or None.

    Ties go to the lowest advertiser id.
    """
    best = second = None
    for adv, bid in sorted(bids):
        if best is None or bid > best[1]:
            second = best
            best = (adv, bid)
        elif second is None or bid > second[1]:
            second = (adv, bid)
    if best is None or best[1] < reserve:
        return None
    price = reserve if second is None else max(second[1], reserve)
    return best[0], price


@numba.njit(cache=True)
def _auction_step(values, count, lambdas, remaining, reserve, winners, prices):
    """Run ``count`` auctions in order, mutating ``remaining`` in place.

    Returns (learner reward, learner spend, learner wins).
    """
    n = lambdas.shape[0]
    reward = 0.0
    spend = 0.0
    wins = 0
    for k in range(count):
        best = -1
        best_bid = -1.0
        second_bid = -1.0
        for j in range(n):
            bid = values[k, j] / lambdas[j]
            if remaining[j] < bid:
                continue
            if bid > best_bid:
                second_bid = best_bid
                best_bid = bid
                best = j
            elif bid > second_bid:
                second_bid = bid
        if best < 0 or best_bid < reserve:
            winners[k] = -1
            prices[k] = 0.0
            continue
        price = second_bid if second_bid > reserve else reserve
        remaining[best] -= price
        if remaining[best] < 0.0:
            remaining[best] = 0.0
        winners[k] = best
        prices[k] = price
        if best == 0:
            reward += values[k, 0]
            spend += price
            wins += 1
    return reward, spend, wins


@numba.njit(cache=True)
def _auction_step_batch(values, counts, lambdas, remaining, reserve, out):
    """Batched variant over episodes; ``out[e] = (reward, spend, wins)``."""
    E = values.shape[0]
    winners = np.empty(values.shape[1], dtype=np.int64)
    prices = np.empty(values.shape[1])
    for e in range(E):
        r, s, w = _auction_step(values[e], counts[e], lambdas[e], remaining[e], reserve, winners, prices)
        out[e, 0] = r
        out[e, 1] = s
        out[e, 2] = w


def clamp_lambda(config: WorldConfig, lam):
    lo, hi = config.lambda_range
    return np.clip(lam, lo, hi)


def env_step(world: WorldState, learner_lambda: float) -> tuple[State, StepOutcome]:
    """Advance ``world`` by one time step with the learner bidding ``v / learner_lambda``."""
    if world.done:
        raise EpisodeFinished("episode already finished")
    cfg = world.config
    lam = float(clamp_lambda(cfg, learner_lambda))
    lambdas = np.concatenate(([lam], world.opponent_lambdas))
    t = world.t
    count = int(world.counts[t])
    winners = np.empty(cfg.max_impressions, dtype=np.int64)
    prices = np.empty(cfg.max_impressions)
    reward, spend, wins = _auction_step(
        world.values[t], count, lambdas, world.remaining_budget, cfg.reserve_price, winners, prices
    )
    if world.auction_log is not None:
        for k in range(count):
            w = int(winners[k])
            world.auction_log.append((t, k, w, float(prices[k]), float(world.values[t, k, w]) if w >= 0 else 0.0))
    world.t += 1
    return world.state(), StepOutcome(float(reward), float(spend), int(wins), world.done)


def write_auction_log(world: WorldState, path: str | Path) -> None:
    if world.auction_log is None:
        raise ValueError("world was created without log_auctions=True")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "impression_index", "winner_id", "price", "value"])
        for row in world.auction_log:
            w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4])])


# --- config file -----------------------------------------------------------

_TUPLE_FIELDS = {
    "impressions_per_step": int,
    "budget_range": float,
    "value_range": float,
    "lambda_range": float,
    "opponent_lambda_range": float,
}


def parse_config_text(text: str, base: WorldConfig | None = None) -> WorldConfig:
    """Parse ``key = value`` lines. Ranges are written ``lo,hi``; ``#`` starts a comment."""
    known = {f.name: f for f in fields(WorldConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _TUPLE_FIELDS:
                if val.lower() == "none":
                    updates[key] = None
                    continue
                parts = [p.strip() for p in val.split(",")]
                if len(parts) != 2:
                    raise ValueError("expected lo,hi")
                updates[key] = tuple(_TUPLE_FIELDS[key](p) for p in parts)
            elif key == "learner_budget":
                updates[key] = None if val.lower() == "none" else float(val)
            elif key in ("num_advertisers", "episode_steps", "seed"):
                updates[key] = int(val)
            else:
                updates[key] = float(val)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    return replace(base or WorldConfig(), **updates)


def load_config(path: str | Path, base: WorldConfig | None = None) -> WorldConfig:
    return parse_config_text(Path(path).read_text(), base)


def format_config(config: WorldConfig) -> str:
    lines = []
    for f in fields(WorldConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = f"{v[0]!r},{v[1]!r}"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --- batched rollouts ------------------------------------------------------


class Controller:
    """Per-step action source for :func:`rollout`.

    ``reset(n)`` is called once per batch, ``act(states, t)`` must return one
    lambda per episode and ``observe(rewards)`` receives the step rewards.
    """

    def reset(self, n: int, episode_ids: np.ndarray) -> None:
        pass

    def act(self, states: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def observe(self, rewards: np.ndarray) -> None:
        pass


@dataclass
class Rollouts:
    states: np.ndarray       # (E, T, 3)
    actions: np.ndarray      # (E, T)
    rewards: np.ndarray      # (E, T)
    next_states: np.ndarray  # (E, T, 3)
    spends: np.ndarray       # (E, T)
    seeds: np.ndarray        # (E,)
    initial_budget: np.ndarray  # (E,)

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def rollout(
    config: WorldConfig,
    seeds: Sequence[int],
    controller: Controller | Callable[[np.ndarray, int], np.ndarray],
    chunk: int | None = None,
) -> Rollouts:
    """Run one episode per seed, vectorized across episodes.

    Produces exactly the same numbers as stepping each ``init_episode(config, seed)``
    with :func:`env_step`. Episodes are simulated in chunks to bound memory; the
    controller is reset per chunk with the chunk's seeds, so any per-episode
    randomness must be keyed on those seeds.
    """
    if not isinstance(controller, Controller):
        controller = _FnController(controller)
    seeds = np.asarray(seeds, dtype=np.int64)
    E, T = len(seeds), config.episode_steps
    if chunk is None:
        per_world = T * config.max_impressions * config.num_advertisers * 8
        chunk = max(1, min(512, (64 << 20) // max(per_world, 1)))
    out = Rollouts(
        states=np.empty((E, T, 3)),
        actions=np.empty((E, T)),
        rewards=np.empty((E, T)),
        next_states=np.empty((E, T, 3)),
        spends=np.empty((E, T)),
        seeds=seeds,
        initial_budget=np.empty(E),
    )
    for a in range(0, E, chunk):
        b = min(a + chunk, E)
        _rollout_chunk(config, seeds[a:b], controller, out, a)
    return out


def _rollout_chunk(config, seeds, controller, out, offset):
    ws = [init_episode(config, int(s)) for s in seeds]
    E = len(ws)
    values = np.stack([w.values for w in ws])
    counts = np.stack([w.counts for w in ws])
    remaining = np.stack([w.remaining_budget for w in ws])
    b0 = remaining[:, LEARNER].copy()
    lambdas = np.empty((E, config.num_advertisers))
    lambdas[:, 1:] = np.stack([w.opponent_lambdas for w in ws])
    sl = slice(offset, offset + E)
    out.initial_budget[sl] = b0
    res = np.empty((E, 3))
    controller.reset(E, seeds)
    for t in range(config.episode_steps):
        s = _states(config, t, b0, remaining[:, LEARNER])
        act = np.asarray(controller.act(s, t), dtype=float).reshape(E)
        act = clamp_lambda(config, act)
        lambdas[:, LEARNER] = act
        _auction_step_batch(
            np.ascontiguousarray(values[:, t]), np.ascontiguousarray(counts[:, t]),
            lambdas, remaining, config.reserve_price, res,
        )
        out.states[sl, t] = s
        out.actions[sl, t] = act
        out.rewards[sl, t] = res[:, 0]
        out.spends[sl, t] = res[:, 1]
        out.next_states[sl, t] = _states(config, t + 1, b0, remaining[:, LEARNER])
        controller.observe(res[:, 0].copy())


class _FnController(Controller):
    def __init__(self, fn):
        self.fn = fn

    def act(self, states, t):
        return self.fn(states, t)


def _states(config: WorldConfig, t: int, b0: np.ndarray, bt: np.ndarray) -> np.ndarray:
    s = np.empty((len(b0), 3))
    s[:, 0] = t / config.episode_steps
    s[:, 1] = (b0 - bt) / b0
    s[:, 2] = bt / config.budget_scale
    return s


