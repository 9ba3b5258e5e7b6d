import csv

import numpy as np
import pytest

from autobid.data import Dataset
from autobid.env import WorldConfig, desk_config, rollout
from autobid.policy import PolicyController
from autobid.seas import (
    FixedRangeController, SafePolicySet, SarsaConfig, SeasController, estimate_Js, exact_q_injection,
    fit_q_sarsa, fixed_range_episode, returns_to_go, seas_episode, seas_select,
)
from autobid.weighting import WeightingConfig, fit_reward_model

WORLD = desk_config(episode_steps=8)


def const(lam):
    return lambda s: np.full(len(np.atleast_2d(s)), float(lam))


def const_q(value):
    return exact_q_injection(lambda s, a: np.full(len(s), float(value)))


def deterministic_world(**kw):
    base = dict(num_advertisers=3, episode_steps=6, impressions_per_step=(10, 10), budget_range=(2000.0, 2000.0),
                value_range=(5.0, 5.0), opponent_lambda_range=(4.0, 4.0))
    base.update(kw)
    return WorldConfig(**base)


class TestSelect:
    def test_scalar(self):
        assert seas_select([1.0, 3.0], 2.0, 5.0) == (True, 1, 3.0)
        assert seas_select([1.0, 3.0], 1.0, 5.0)[0] is False

    def test_batch(self):
        explore, temp, qmax = seas_select(np.array([[1.0, 3.0], [4.0, 0.0]]), np.array([0.0, 0.0]), 3.5)
        assert list(explore) == [False, True] and list(temp) == [1, 0] and list(qmax) == [3.0, 4.0]

    def test_safe_set_validation(self):
        with pytest.raises(ValueError):
            SafePolicySet([], [], 1.0, 0.05)
        with pytest.raises(ValueError):
            SafePolicySet([const(1)], [const_q(0)], 1.0, 1.0)
        assert SafePolicySet([const(1)], [const_q(0)], 200.0, 0.05).threshold == pytest.approx(190.0)


class TestSeasEpisode:
    def test_loose_threshold_always_explores(self, tiny_policy):
        # threshold ~1e-9: any positive Q clears it from the first step
        safe = SafePolicySet([const(9.0)], [const_q(1e-6)], 1000.0, 1.0 - 1e-12)
        D, trace = seas_episode(tiny_policy, safe, WORLD, seed=3)
        assert trace.explored.all()
        np.testing.assert_array_equal(D.actions[0], trace.a_e[0])

    def test_hopeless_q_always_safe(self, tiny_policy):
        safe = SafePolicySet([const(9.0)], [const_q(-1e12)], 1000.0, 0.05)
        D, trace = seas_episode(tiny_policy, safe, WORLD, seed=3)
        assert not trace.explored.any()
        assert np.all(D.actions == 9.0)

    def test_degenerate_identity(self, tiny_policy):
        safe = SafePolicySet([tiny_policy], [const_q(5.0)], 1e6, 0.5)
        ids = np.arange(20)
        ctl = SeasController(tiny_policy, safe, WORLD.lambda_range)
        a = rollout(WORLD, ids, ctl)
        b = rollout(WORLD, ids, PolicyController(tiny_policy))
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)

    def test_safe_action_uses_previous_temp(self):
        # policy 0 bids lambda 2, policy 1 lambda 8; Q prefers policy 1 only at odd steps
        def q(which):
            return lambda s, a: np.where((np.round(s[:, 0] * 8) % 2 == 1) == bool(which), 1.0, 0.0) - 1e9
        safe = SafePolicySet([const(2.0), const(8.0)], [q(0), q(1)], 1000.0, 0.05)
        _, trace = seas_episode(const(5.0), safe, WORLD, seed=0)
        assert not trace.explored.any()
        assert trace.a_s[0, 0] == 2.0  # temp starts at the first safe policy
        for t in range(1, 8):
            expected = [2.0, 8.0][trace.temp[0, t - 1]]
            assert trace.a_s[0, t] == expected
        assert list(trace.temp[0]) == [0, 1, 0, 1, 0, 1, 0, 1]

    def test_trace_accounting(self, tiny_policy, tmp_path):
        safe = SafePolicySet([const(6.0)], [const_q(50.0)], 600.0, 0.05)
        D, trace = seas_episode(tiny_policy, safe, WORLD, seed=1)
        np.testing.assert_allclose(trace.cum_reward[0], np.concatenate([[0.0], np.cumsum(D.rewards[0])[:-1]]))
        chosen = np.where(trace.explored[0], trace.a_e[0], trace.a_s[0])
        np.testing.assert_array_equal(chosen, D.actions[0])
        trace.to_csv(tmp_path / "trace.csv")
        rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
        assert len(rows) == 8 and set(rows[0]) >= {"step", "chosen", "q_max", "cum_reward", "threshold"}


class TestFixedRange:
    def test_zero_width_is_safe_policy(self, tiny_policy):
        D = fixed_range_episode(const(9.0), tiny_policy, 0.0, WORLD, seed=2)
        ref = rollout(WORLD, [2], PolicyController(tiny_policy))
        np.testing.assert_array_equal(D.actions, ref.actions)

    def test_wide_is_exploration_policy(self, tiny_policy):
        D = fixed_range_episode(tiny_policy, const(0.1), 10.0, WORLD, seed=2)
        ref = rollout(WORLD, [2], PolicyController(tiny_policy))
        np.testing.assert_array_equal(D.actions, ref.actions)

    def test_clip_band(self, tiny_policy):
        ctl = FixedRangeController(const(9.0), tiny_policy, 0.1)
        ro = rollout(WORLD, np.arange(10), ctl)
        base = tiny_policy(ro.states.reshape(-1, 3)).reshape(ro.actions.shape)
        assert np.all(np.abs(ro.actions - base) <= 0.1 + 1e-12)

    def test_negative_width(self, tiny_policy):
        with pytest.raises(ValueError):
            FixedRangeController(tiny_policy, tiny_policy, -0.1)


class TestEstimateJs:
    def test_deterministic_env(self):
        world = deterministic_world()
        j, se = estimate_Js(const(3.0), world, episodes=50)
        single = rollout(world, [0], lambda s, t: np.full(len(s), 3.0)).returns[0]
        assert se == 0.0 and j == single

    def test_zero_reward_env(self):
        assert estimate_Js(const(3.0), deterministic_world(value_range=(0.0, 0.0)), episodes=20)[0] == 0.0

    def test_standard_error_default_desk(self, desk_policy):
        j, se = estimate_Js(desk_policy, desk_config(), episodes=2000)
        assert se <= 0.01 * j

    def test_episode_count(self):
        with pytest.raises(ValueError):
            estimate_Js(const(1.0), WORLD, episodes=0)


def tabular_dataset(n=300, T=6, rewards=None):
    """Every trajectory visits the same states and takes the same actions."""
    states = np.zeros((n, T, 3))
    states[:, :, 0] = np.arange(T) / T
    next_states = np.zeros_like(states)
    next_states[:, :, 0] = np.arange(1, T + 1) / T
    actions = np.tile(np.linspace(1.0, 6.0, T), (n, 1))
    r = np.tile(np.arange(1.0, T + 1) if rewards is None else rewards, (n, 1))
    return Dataset(np.arange(n), np.arange(n), states, actions, r, next_states)


class TestSarsa:
    cfg = SarsaConfig(td_steps=1500, warm_start_steps=1000, target_refresh=100)

    def test_constant_reward_one_step(self):
        D = tabular_dataset(rewards=np.ones(6))
        q = fit_q_sarsa(D, 0.0, SarsaConfig(gamma=0.0, td_steps=1500, warm_start_steps=1000, target_refresh=100))
        pred = q(D.states.reshape(-1, 3), D.actions.ravel())
        assert np.all(np.abs(pred - 1.0) <= 0.02)

    def test_suffix_sums(self):
        # oracle: Q(s_t, a_t) = sum of the remaining rewards along the fixed trajectory
        D = tabular_dataset()
        q = fit_q_sarsa(D, 1.0, self.cfg)
        pred = q(D.states[0], D.actions[0])
        suffix = returns_to_go(D.rewards[:1], 1.0)[0]
        np.testing.assert_allclose(pred, suffix, rtol=0.02)

    def test_gamma_zero_is_reward_regression(self, tiny_policy):
        ro = rollout(WORLD, np.arange(300), PolicyController(tiny_policy))
        D = Dataset.from_rollouts(ro)
        q = fit_q_sarsa(D, 0.0, SarsaConfig(gamma=0.0, td_steps=1500, warm_start_steps=1500))
        rm = fit_reward_model(D, WeightingConfig())
        f = D.flat()
        a, b = q(f["s"], f["a"]), rm(f["s"], f["a"])
        assert np.sqrt(np.mean((a - b) ** 2)) <= 0.05 * np.abs(b).mean()

    def test_returns_to_go(self):
        np.testing.assert_array_equal(returns_to_go(np.array([[1.0, 2.0, 4.0]]), 0.5), [[3.0, 4.0, 4.0]])
