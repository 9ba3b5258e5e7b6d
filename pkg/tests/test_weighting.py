from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from autobid.data import Dataset
from autobid.env import desk_config, rollout
from autobid.nn import TrainConfig
from autobid.weighting import (
    WeightingConfig, compute_weights, fit_initial_value, fit_reward_model, quality, relabel_returns,
    trajectory_weights, weights,
)


def mu(states, actions):
    """Smooth expected reward used as ground truth."""
    return 20.0 + 10.0 * states[..., 0] - 5.0 * states[..., 1] + 3.0 / actions


def synthetic(n=200, T=8, noise=0.0, seed=0, budget=None):
    rng = np.random.default_rng(seed)
    world = desk_config(episode_steps=T, learner_budget=budget)
    ro = rollout(world, np.arange(seed, seed + n), lambda s, t: rng.uniform(1.0, 9.0, size=len(s)))
    r = mu(ro.states, ro.actions) + noise * rng.uniform(-1, 1, size=ro.actions.shape)
    return Dataset(ro.seeds, np.arange(n), ro.states, ro.actions, r, ro.next_states)


def one_step_dataset(adv_like_returns):
    n = len(adv_like_returns)
    return Dataset(np.arange(n), np.arange(n), np.zeros((n, 1, 3)), np.ones((n, 1)),
                   np.asarray(adv_like_returns, dtype=float)[:, None], np.zeros((n, 1, 3)))


class TestRewardModel:
    def test_deterministic_rewards(self):
        D = synthetic()
        m = fit_reward_model(D)
        f = D.flat()
        rmse = np.sqrt(np.mean((m(f["s"], f["a"]) - f["r"]) ** 2))
        assert rmse <= 0.01 * np.abs(f["r"]).mean()

    def test_noisy_rewards_denoised(self):
        D = synthetic(noise=10.0, seed=1)
        m = fit_reward_model(D)
        f = D.flat()
        pred = m(f["s"], f["a"])
        truth = mu(f["s"], f["a"])
        assert np.sqrt(np.mean((pred - truth) ** 2)) <= np.sqrt(np.mean((pred - f["r"]) ** 2))

    def test_constant_reward(self):
        D = synthetic()
        D.rewards[:] = 4.0
        f = D.flat()
        assert np.max(np.abs(fit_reward_model(D)(f["s"], f["a"]) - 4.0)) <= 1e-2


class TestRelabel:
    def test_exact_model(self):
        D = synthetic()
        np.testing.assert_allclose(relabel_returns(D, mu), D.returns(), rtol=1e-12)

    def test_zero_model(self):
        D = synthetic(n=5)
        assert np.all(relabel_returns(D, lambda s, a: np.zeros(len(a))) == 0.0)

    def test_gamma_zero(self):
        D = synthetic(n=5)
        np.testing.assert_allclose(relabel_returns(D, mu, gamma=0.0), mu(D.states[:, 0], D.actions[:, 0]))


class TestInitialValue:
    def test_shared_start_is_mean(self):
        D = synthetic(n=100, budget=2000.0)
        assert np.ptp(D.states[:, 0], axis=0).max() == 0.0
        R = np.random.default_rng(0).uniform(100, 200, size=100)
        v = fit_initial_value(D, R)(D.states[:1, 0])[0]
        assert abs(v - R.mean()) <= 0.01 * R.mean()

    def test_two_budget_clusters(self):
        # oracle: per-cluster means of the targets
        lo, hi = synthetic(n=100, budget=1500.0), synthetic(n=100, seed=500, budget=3000.0)
        D = Dataset(np.arange(200), np.arange(200), np.concatenate([lo.states, hi.states]),
                    np.concatenate([lo.actions, hi.actions]), np.concatenate([lo.rewards, hi.rewards]),
                    np.concatenate([lo.next_states, hi.next_states]))
        rng = np.random.default_rng(1)
        R = np.concatenate([rng.normal(100, 10, 100), rng.normal(300, 10, 100)])
        v = fit_initial_value(D, R)(D.states[[0, 100], 0])
        assert abs(v[0] - R[:100].mean()) <= 0.05 * R[:100].mean()
        assert abs(v[1] - R[100:].mean()) <= 0.05 * R[100:].mean()

    def test_single_trajectory(self):
        D = synthetic(n=1)
        assert fit_initial_value(D, np.array([321.0]))(D.states[:, 0])[0] == pytest.approx(321.0, rel=1e-2)


class TestQuality:
    def test_examples(self):
        assert quality(110.0, 100.0) == pytest.approx(0.1)
        assert quality(100.0, 100.0) == 0.0
        assert quality(50.0, 100.0) == -0.5

    def test_floor(self):
        adv, floored = quality(np.array([5.0, 5.0]), np.array([-1.0, 4.0]), v_floor=1.0)
        np.testing.assert_allclose(adv, [4.0, 0.25])
        assert list(floored) == [True, False]


class TestWeights:
    def test_equal_quality_uniform(self):
        D = synthetic(n=7, T=3)
        w = weights(np.full(7, 0.37), 0.1, D)
        assert np.all(w.w == w.w[0, 0]) and w.w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_softmax_example(self):
        getcontext().prec = 40
        e1, em1 = Decimal(1).exp(), Decimal(-1).exp()
        oracle = [float(e1 / (e1 + em1)), float(em1 / (e1 + em1))]
        w = weights(np.array([0.1, -0.1]), 0.1, one_step_dataset([1.0, 1.0]))
        np.testing.assert_allclose(w.w[:, 0], oracle, atol=1e-12)
        np.testing.assert_allclose(w.w[:, 0], [0.8808, 0.1192], atol=1e-4)

    def test_infinite_temperature(self):
        D = synthetic(n=10, T=4)
        adv = np.random.default_rng(0).normal(size=10)
        w = weights(adv, 1e9, D)
        assert np.max(np.abs(w.w - 1.0 / 40)) <= 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            weights(np.zeros(3), 0.1, synthetic(n=2, T=2))

    @given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-5, 5)), st.floats(0.01, 10.0))
    def test_monotone(self, adv, alpha):
        p = trajectory_weights(adv, alpha)
        i, j = np.argmax(adv), np.argmin(adv)
        if adv[i] > adv[j]:
            assert p[i] >= p[j]
        order = np.argsort(adv, kind="stable")
        assert np.all(np.diff(p[order]) >= 0)

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5)), st.floats(0.01, 10.0))
    def test_normalised(self, adv, alpha):
        p = trajectory_weights(adv, alpha)
        assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-9

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5)), st.floats(0.05, 10.0),
           st.floats(-3, 3))
    def test_shift_invariant(self, adv, alpha, c):
        np.testing.assert_allclose(trajectory_weights(adv + c, alpha), trajectory_weights(adv, alpha),
                                   rtol=1e-9, atol=1e-12)

    def test_strict_when_distinct(self):
        p = trajectory_weights(np.array([0.2, 0.1, -0.3]), 0.1)
        assert p[0] > p[1] > p[2]


class TestPipeline:
    cfg = WeightingConfig(reward_train=TrainConfig(1e-3, 256, 500), value_train=TrainConfig(1e-3, 256, 300))

    def test_robust(self):
        D = synthetic(n=50, noise=5.0)
        W, q = compute_weights(D, self.cfg)
        assert W.shape == D.actions.shape and abs(W.w.sum() - 1.0) <= 1e-9
        assert np.all(np.isfinite(q.advantage)) and len(q.advantage) == 50
        # all transitions of a trajectory share its weight
        assert np.all(W.w == W.w[:, :1])

    def test_raw_uses_observed_returns(self):
        D = synthetic(n=50, noise=5.0)
        _, q = compute_weights(D, WeightingConfig(returns="raw", value_train=self.cfg.value_train))
        np.testing.assert_array_equal(q.relabeled, D.returns())

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            compute_weights(synthetic(n=3), WeightingConfig(returns="mean"))
