"""Exact finite-horizon MDP machinery for checking the safety and weighting claims.

Transitions are deterministic, rewards may be stochastic with finite support,
and the horizon is small enough that every trajectory can be enumerated. Steps
run ``t = 0 .. horizon`` inclusive. Expectations are accumulated as exact
fractions so comparisons carry no rounding slack.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .seas import seas_select

MAX_TRAJECTORIES = 10**6


class EnumerationTooLarge(RuntimeError):
    pass


class OracleViolation(AssertionError):
    pass


def _exact(x) -> Fraction:
    # numpy scalars must become Python numbers first or Fraction arithmetic overflows
    return Fraction(x.item() if hasattr(x, "item") else x)


@dataclass
class TabularMDP:
    next_state: np.ndarray      # (S, A) int
    reward_values: np.ndarray   # (S, A, K)
    reward_probs: list          # (S, A, K) nested lists of Fraction
    horizon: int                # last step index
    rho: list                   # (S,) Fractions
    gamma: Fraction = Fraction(1)

    def __post_init__(self):
        self.next_state = np.asarray(self.next_state, dtype=np.int64)
        self.reward_values = np.asarray(self.reward_values)
        S, A = self.next_state.shape
        if self.reward_values.shape[:2] != (S, A):
            raise ValueError("reward table must be (S, A, K)")
        if np.any((self.next_state < 0) | (self.next_state >= S)):
            raise ValueError("transition table must map into the state set")
        self.reward_probs = [[[Fraction(p) for p in self.reward_probs[s][a]] for a in range(A)] for s in range(S)]
        self.rho = [Fraction(p) for p in self.rho]
        if sum(self.rho) != 1 or any(p < 0 for p in self.rho):
            raise ValueError("rho must be a probability vector")
        for s in range(S):
            for a in range(A):
                if sum(self.reward_probs[s][a]) != 1:
                    raise ValueError(f"reward distribution at ({s},{a}) does not sum to 1")
        self.gamma = Fraction(self.gamma)
        self._support = [[[(_exact(self.reward_values[s, a, k]), p)
                           for k, p in enumerate(self.reward_probs[s][a]) if p > 0]
                          for a in range(A)] for s in range(S)]
        self._mean = [[sum((r * p for r, p in self._support[s][a]), Fraction(0)) for a in range(A)]
                      for s in range(S)]

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    def reward_support(self, s: int, a: int) -> list[tuple[Fraction, Fraction]]:
        return self._support[s][a]

    def mean_reward(self, s: int, a: int) -> Fraction:
        return self._mean[s][a]

    def n_trajectories(self) -> int:
        K = max(len(self.reward_support(s, a)) for s in range(self.n_states) for a in range(self.n_actions))
        return sum(1 for p in self.rho if p > 0) * K ** (self.horizon + 1)

    def check_enumerable(self):
        n = self.n_trajectories()
        if n > MAX_TRAJECTORIES:
            raise EnumerationTooLarge(f"{n} trajectories exceed the enumeration budget {MAX_TRAJECTORIES}")


TabularPolicy = Sequence[int]


def exact_J(mdp: TabularMDP, policy: TabularPolicy) -> Fraction:
    """E[sum_t gamma^t r_t] by enumerating every initial state and reward outcome."""
    mdp.check_enumerable()

    def walk(s, t, disc):
        if t > mdp.horizon:
            return Fraction(0)
        a = int(policy[s])
        nxt = int(mdp.next_state[s, a])
        tail = walk(nxt, t + 1, disc * mdp.gamma)
        return sum((p * (disc * r + tail) for r, p in mdp.reward_support(s, a)), Fraction(0))

    return sum((p * walk(s, 0, Fraction(1)) for s, p in enumerate(mdp.rho) if p > 0), Fraction(0))


def exact_Q(mdp: TabularMDP, policy: TabularPolicy) -> list:
    """Backward induction. ``Q[t][s][a]`` is the expected return of taking a at (t, s)
    and following ``policy`` afterwards, counted from step t (undiscounted at t)."""
    mdp.check_enumerable()
    S, A, H = mdp.n_states, mdp.n_actions, mdp.horizon
    Q = [[[Fraction(0)] * A for _ in range(S)] for _ in range(H + 1)]
    V_next = [Fraction(0)] * S
    for t in range(H, -1, -1):
        for s in range(S):
            for a in range(A):
                Q[t][s][a] = mdp.mean_reward(s, a) + mdp.gamma * V_next[int(mdp.next_state[s, a])]
        V_next = [Q[t][s][int(policy[s])] for s in range(S)]
    return Q


def exact_V(mdp: TabularMDP, policy: TabularPolicy) -> list:
    Q = exact_Q(mdp, policy)
    return [[Q[t][s][int(policy[s])] for s in range(mdp.n_states)] for t in range(mdp.horizon + 1)]


def q_as_float(Q) -> np.ndarray:
    return np.array([[[float(x) for x in row] for row in Qt] for Qt in Q])


def q_as_array(Q) -> np.ndarray:
    """Exact Q table as an object array of Fractions, shape (H+1, S, A)."""
    arr = np.empty((len(Q), len(Q[0]), len(Q[0][0])), dtype=object)
    for t, Qt in enumerate(Q):
        for s, row in enumerate(Qt):
            for a, x in enumerate(row):
                arr[t, s, a] = x
    return arr


# --- SEAS inside the enumeration -------------------------------------------


def seas_expected_return(mdp: TabularMDP, pi_e: TabularPolicy, safe_policies: Sequence[TabularPolicy],
                         q_tables: Sequence[np.ndarray], threshold, record_paths: bool = False):
    """Exact E[R] of SEAS (undiscounted) plus, optionally, every path with its probability.

    The per-step decision is made by :func:`autobid.seas.seas_select`, the same code the
    simulator uses.
    """
    mdp.check_enumerable()
    q_stack = np.stack(q_tables)  # (n, H+1, S, A)
    paths = []

    def walk(s, t, cum, temp, prob, hist):
        if t > mdp.horizon:
            if record_paths:
                paths.append((prob, cum, tuple(hist)))
            return Fraction(0)
        a_e = int(pi_e[s])
        a_s = int(safe_policies[temp][s])
        explore, new_temp, q_max = seas_select(q_stack[:, t, s, a_e], cum, threshold)
        a = a_e if explore else a_s
        nxt = int(mdp.next_state[s, a])
        total = Fraction(0)
        for r, p in mdp.reward_support(s, a):
            step = (t, s, a, "e" if explore else "s", int(new_temp), float(q_max), float(r))
            total += p * (r + walk(nxt, t + 1, cum + r, int(new_temp), prob * p, hist + [step]))
        return total

    value = sum((p * walk(s, 0, Fraction(0), 0, p, []) for s, p in enumerate(mdp.rho) if p > 0), Fraction(0))
    return (value, paths) if record_paths else value


@dataclass
class SeasBoundReport:
    j_s: Fraction
    rows: list = field(default_factory=list)  # (eps, expected_return, threshold, slack)
    counterexample: object = None

    @property
    def passed(self) -> bool:
        return all(row[3] >= 0 for row in self.rows)

    @property
    def min_slack(self) -> Fraction:
        return min(row[3] for row in self.rows)


def verify_theorem1(mdp: TabularMDP, pi_e: TabularPolicy, safe_policies: Sequence[TabularPolicy],
                    eps_grid: Sequence[float] = (0.4, 0.3, 0.2, 0.1, 0.05, 0.01),
                    j_s: Fraction | None = None, raise_on_failure: bool = False) -> SeasBoundReport:
    """Check E[R(SEAS)] >= (1 - eps) J_s exactly for every eps, with exact Q inputs."""
    if mdp.gamma != 1:
        raise ValueError("SEAS sums raw rewards; the oracle requires gamma = 1")
    Js = [exact_J(mdp, p) for p in safe_policies]
    if j_s is None:
        j_s = min(Js)
    if any(J < j_s for J in Js):
        raise ValueError("every safe policy must satisfy J(pi_s) >= J_s")
    q_tables = [q_as_array(exact_Q(mdp, p)) for p in safe_policies]
    report = SeasBoundReport(j_s)
    for eps in eps_grid:
        # decimal literal of eps, not its binary float expansion
        thr_exact = (1 - (Fraction(repr(eps)) if isinstance(eps, float) else Fraction(eps))) * j_s
        value, paths = seas_expected_return(mdp, pi_e, safe_policies, q_tables, thr_exact, record_paths=True)
        slack = value - thr_exact
        report.rows.append((eps, value, thr_exact, slack))
        if slack < 0 and report.counterexample is None:
            report.counterexample = {"eps": eps, "expected_return": value, "threshold": thr_exact,
                                     "paths": sorted(paths, key=lambda p: p[1])}
    if raise_on_failure and not report.passed:
        ce = report.counterexample
        raise OracleViolation(
            f"SEAS bound violated at eps={ce['eps']}: E[R]={float(ce['expected_return']):.6g} < "
            f"{float(ce['threshold']):.6g}; lowest-return path: {ce['paths'][0]}"
        )
    return report


# --- weighted behaviour policy (trajectory weighting) -----------------------


@dataclass
class WeightingReport:
    j_uniform: Fraction
    j_weighted: Fraction
    groups: list  # (s0, V_uniform(s0), V_weighted(s0))
    pair_terms_min: Fraction

    @property
    def passed(self) -> bool:
        return (self.j_weighted >= self.j_uniform and self.pair_terms_min >= 0
                and all(vw >= vu for _, vu, vw in self.groups))


def verify_weighted_behaviour(mdp: TabularMDP, policies: Sequence[TabularPolicy], start_states: Sequence[int],
                              alpha: float, raise_on_failure: bool = False) -> WeightingReport:
    """Compare the uniform mixture of per-trajectory policies with the exp-weighted one.

    Trajectory i is produced by ``policies[i]`` from ``start_states[i]``; its relabeled
    return is its exact expected return and the initial-state value is the per-group
    mean (the least-squares fit for a tabular start state). Weights are
    ``exp(((R_i - V(s_i0)) / V(s_i0)) / alpha)``, normalised over all trajectories.
    Both mixtures are valued per start-state group, then averaged under rho
    restricted to the groups present.
    """
    from .weighting import trajectory_weights

    if len(policies) != len(start_states) or not policies:
        raise ValueError("need one start state per policy")
    R = [exact_V(mdp, p)[0][int(s0)] for p, s0 in zip(policies, start_states)]
    groups: dict[int, list[int]] = {}
    for i, s0 in enumerate(start_states):
        groups.setdefault(int(s0), []).append(i)
    v_hat = {s0: sum((R[i] for i in idx), Fraction(0)) / len(idx) for s0, idx in groups.items()}
    adv = np.array([float((R[i] - v_hat[int(s0)]) / v_hat[int(s0)]) if v_hat[int(s0)] != 0 else 0.0
                    for i, s0 in enumerate(start_states)])
    w = [Fraction(float(x)) for x in trajectory_weights(adv, alpha)]
    mass = sum((mdp.rho[s0] for s0 in groups), Fraction(0))
    if mass == 0:
        raise ValueError("start states have zero probability under rho")
    rows = []
    j_u = j_w = Fraction(0)
    pair_min = None
    for s0, idx in groups.items():
        vu = v_hat[s0]
        vw = sum((w[i] * R[i] for i in idx), Fraction(0)) / sum((w[i] for i in idx), Fraction(0))
        for a_ in range(len(idx)):
            for b_ in range(a_ + 1, len(idx)):
                i, j = idx[a_], idx[b_]
                term = (w[i] - w[j]) * (R[i] - R[j])
                pair_min = term if pair_min is None else min(pair_min, term)
        rows.append((s0, vu, vw))
        j_u += mdp.rho[s0] / mass * vu
        j_w += mdp.rho[s0] / mass * vw
    report = WeightingReport(j_u, j_w, rows, Fraction(0) if pair_min is None else pair_min)
    if raise_on_failure and not report.passed:
        bad = [g for g in rows if g[2] < g[1]]
        raise OracleViolation(f"weighted behaviour policy worse than uniform in group(s) {bad}")
    return report


verify_appendixA = verify_weighted_behaviour


# --- random instances ------------------------------------------------------


def random_mdp(rng: np.random.Generator, n_states: int = 6, n_actions: int = 3, horizon: int = 5,
               stochastic: bool = True, single_start: bool = False, max_reward: int = 9) -> TabularMDP:
    """Deterministic transitions, integer mean rewards, optional two-point reward noise.

    Each reward is ``m - d`` or ``m + d`` with probability 1/2 and ``0 <= d <= m``,
    so rewards stay nonnegative.
    """
    nxt = rng.integers(0, n_states, size=(n_states, n_actions))
    m = rng.integers(0, max_reward + 1, size=(n_states, n_actions))
    d = rng.integers(0, m + 1) if stochastic else np.zeros_like(m)
    values = np.stack([m - d, m + d], axis=-1)
    probs = [[[Fraction(1, 2)] * 2] * n_actions] * n_states
    rho = [Fraction(1)] + [Fraction(0)] * (n_states - 1) if single_start else [Fraction(1, n_states)] * n_states
    return TabularMDP(nxt, values, probs, horizon, rho)


def adversarial_policies(mdp: TabularMDP, safe_policy: TabularPolicy) -> list[np.ndarray]:
    """Three exploration policies built to hurt: worst action under the safe policy's Q,
    greediest immediate reward, and widest reward spread."""
    Q = q_as_float(exact_Q(mdp, safe_policy))
    S, A = mdp.n_states, mdp.n_actions
    mean = np.array([[float(mdp.mean_reward(s, a)) for a in range(A)] for s in range(S)])
    spread = np.array([[float(max(r for r, _ in mdp.reward_support(s, a)) - min(r for r, _ in mdp.reward_support(s, a)))
                        for a in range(A)] for s in range(S)])
    return [Q[0].argmin(axis=1), mean.argmax(axis=1), spread.argmax(axis=1)]


def random_trajectory_set(rng: np.random.Generator, mdp: TabularMDP, n: int = 6, equal: bool = False):
    """``(policies, start_states)`` for the weighting check. ``equal`` repeats one policy
    from one start state so every trajectory has the same expected return."""
    starts = [s for s, p in enumerate(mdp.rho) if p > 0]
    if equal:
        pi = rng.integers(0, mdp.n_actions, mdp.n_states)
        s0 = int(rng.choice(starts))
        return [pi] * n, [s0] * n
    policies = [rng.integers(0, mdp.n_actions, mdp.n_states) for _ in range(n)]
    return policies, [int(s) for s in rng.choice(starts, size=n)]


# --- randomized batches ------------------------------------------------------


@dataclass
class SuiteResult:
    runs: int
    violations: int
    rows: list = field(default_factory=list)   # one dict per checked case
    first_failure: object = None

    @property
    def passed(self) -> bool:
        return self.violations == 0


def seas_bound_suite(n_mdps: int = 50, seed: int = 0, eps_grid: Sequence[float] = (0.4, 0.3, 0.2, 0.1, 0.05, 0.01),
                   **mdp_kw) -> SuiteResult:
    """Random MDPs, one random safe policy each, checked against the three adversarial explorers."""
    rng = np.random.default_rng(seed)
    res = SuiteResult(0, 0)
    for i in range(n_mdps):
        mdp = random_mdp(rng, **mdp_kw)
        safe = rng.integers(0, mdp.n_actions, mdp.n_states)
        for j, pi_e in enumerate(adversarial_policies(mdp, safe)):
            rep = verify_theorem1(mdp, pi_e, [safe], eps_grid)
            res.runs += 1
            for eps, value, thr, slack in rep.rows:
                res.rows.append({"mdp": i, "explorer": j, "epsilon": eps, "expected_return": float(value),
                                 "threshold": float(thr), "slack": float(slack), "ok": slack >= 0})
            if not rep.passed:
                res.violations += 1
                if res.first_failure is None:
                    res.first_failure = {"mdp": i, "explorer": j, **rep.counterexample}
    return res


def weighting_suite(n_sets: int = 100, seed: int = 0, alpha: float = 0.1, equal_every: int = 5) -> SuiteResult:
    """Random trajectory sets; every ``equal_every``-th set has equal expected returns."""
    rng = np.random.default_rng(seed)
    res = SuiteResult(0, 0)
    for i in range(n_sets):
        mdp = random_mdp(rng, single_start=bool(i % 2))
        equal = equal_every > 0 and i % equal_every == 0
        policies, starts = random_trajectory_set(rng, mdp, equal=equal)
        rep = verify_weighted_behaviour(mdp, policies, starts, alpha)
        ok = rep.passed and (not equal or rep.j_weighted == rep.j_uniform)
        res.runs += 1
        res.rows.append({"set": i, "equal_returns": equal, "j_uniform": float(rep.j_uniform),
                         "j_weighted": float(rep.j_weighted), "pair_terms_min": float(rep.pair_terms_min), "ok": ok})
        if not ok:
            res.violations += 1
            if res.first_failure is None:
                res.first_failure = {"set": i, "report": rep}
    return res
