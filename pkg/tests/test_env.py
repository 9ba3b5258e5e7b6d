import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autobid.env import (
    EpisodeFinished, WorldConfig, compute_bid, desk_config, env_step, format_config, init_episode,
    parse_config_text, rollout, run_auction, write_auction_log,
)


def tiny(**kw):
    return desk_config(episode_steps=8, **kw)


class TestInitEpisode:
    def test_fixed_count(self):
        w = init_episode(WorldConfig(impressions_per_step=(175, 175), num_advertisers=3), seed=1)
        assert np.all(w.counts == 175)

    def test_same_seed_identical(self):
        cfg = tiny()
        a, b = init_episode(cfg, 7), init_episode(cfg, 7)
        for name in ("counts", "values", "remaining_budget", "initial_budget", "opponent_lambdas"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert a.t == b.t == 0

    def test_mean_impressions(self):
        # the schedule does not depend on the number of advertisers, so one keeps this cheap
        cfg = WorldConfig(num_advertisers=1)
        counts = np.concatenate([init_episode(cfg, s).counts for s in range(10_000)])
        assert abs(counts.mean() - 175.0) <= 0.01 * 175.0

    def test_values_and_budgets_in_range(self):
        cfg = tiny()
        w = init_episode(cfg, 3)
        assert np.all(w.values >= 0) and np.all(w.values <= 10.0)
        assert np.all((w.initial_budget >= 1500) & (w.initial_budget <= 3000))
        assert np.all((w.opponent_lambdas >= 3.0) & (w.opponent_lambdas <= 6.0))


class TestComputeBid:
    def test_value_over_lambda(self):
        assert compute_bid(0.5, 0.5) == 1.0

    def test_zero_value(self):
        assert compute_bid(0.0, 3.7) == 0.0

    def test_zero_lambda(self):
        with pytest.raises(ValueError):
            compute_bid(1.0, 0.0)


class TestRunAuction:
    def test_second_price(self):
        assert run_auction([(0, 3.0), (1, 2.0), (2, 1.0)], 0.0) == (0, 2.0)

    def test_single_bid_pays_reserve(self):
        assert run_auction([(4, 5.0)], 0.0) == (4, 0.0)

    def test_tie_lowest_id(self):
        assert run_auction([(1, 2.0), (0, 2.0)], 0.0) == (0, 2.0)

    def test_reserve_not_met(self):
        assert run_auction([(0, 1.0)], 2.0) is None

    def test_reserve_floor(self):
        assert run_auction([(0, 5.0), (1, 1.0)], 2.0) == (0, 2.0)

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=6), st.integers(0, 5), st.floats(0, 50))
    def test_raising_bid_never_loses(self, bids, who, extra):
        who = who % len(bids)
        before = run_auction(list(enumerate(bids)), 0.0)
        raised = list(bids)
        raised[who] += extra
        after = run_auction(list(enumerate(raised)), 0.0)
        if before is not None and before[0] == who:
            assert after[0] == who


class TestEnvStep:
    def test_exhausted_budget_earns_nothing(self):
        cfg = tiny()
        w = init_episode(cfg, 0)
        w.remaining_budget[0] = 0.0
        for _ in range(cfg.episode_steps):
            _, out = env_step(w, 1.0)
            assert out.reward == 0.0 and out.wins == 0
        assert w.done

    def test_uncontested_wins_everything(self):
        cfg = WorldConfig(num_advertisers=1, episode_steps=4, learner_budget=1e9)
        w = init_episode(cfg, 5)
        for t in range(cfg.episode_steps):
            _, out = env_step(w, cfg.lambda_range[0])
            assert out.reward == pytest.approx(w.values[t, :w.counts[t], 0].sum(), rel=1e-12)
            assert out.spend == 0.0

    def test_identical_sequences(self):
        cfg = tiny()
        lams = np.linspace(0.5, 8.0, cfg.episode_steps)
        runs = []
        for _ in range(2):
            w = init_episode(cfg, 11)
            runs.append([env_step(w, lam) for lam in lams])
        assert runs[0] == runs[1]

    def test_step_after_done(self):
        cfg = tiny()
        w = init_episode(cfg, 0)
        for _ in range(cfg.episode_steps):
            env_step(w, 5.0)
        with pytest.raises(EpisodeFinished):
            env_step(w, 5.0)

    def test_lambda_clamped(self):
        cfg = tiny()
        a, b = init_episode(cfg, 2), init_episode(cfg, 2)
        assert env_step(a, 1e6) == env_step(b, cfg.lambda_range[1])

    def test_state_features(self):
        cfg = tiny()
        w = init_episode(cfg, 4)
        b0 = w.initial_budget[0]
        s, out = env_step(w, 2.0)
        assert s.time_frac == 1 / cfg.episode_steps
        assert s.consumed_frac == pytest.approx(out.spend / b0)
        assert s.budget_left_scaled == pytest.approx((b0 - out.spend) / 3000.0)


class TestInvariants:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 10.0))
    def test_budget_conservation(self, seed, lam):
        cfg = tiny()
        w = init_episode(cfg, seed)
        spent = np.zeros(cfg.num_advertisers)
        while not w.done:
            before = w.remaining_budget.copy()
            env_step(w, lam)
            spent += before - w.remaining_budget
        assert np.all(w.remaining_budget >= 0)
        assert np.all(spent <= w.initial_budget)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_reward_matches_auction_log(self, seed):
        cfg = tiny()
        w = init_episode(cfg, seed, log_auctions=True)
        rewards = []
        rng = np.random.default_rng(seed)
        while not w.done:
            rewards.append(env_step(w, rng.uniform(0.5, 6.0))[1].reward)
        per_step = np.zeros(cfg.episode_steps)
        for step, _, winner, _, value in w.auction_log:
            if winner == 0:
                per_step[step] += value
        np.testing.assert_allclose(rewards, per_step, rtol=1e-12)

    def test_episode_length_with_exhaustion(self):
        cfg = tiny(learner_budget=1.0)
        ro = rollout(cfg, np.arange(20), lambda s, t: np.full(len(s), 0.1))
        assert ro.actions.shape == (20, cfg.episode_steps)
        assert np.all(ro.states[:, :, 0] == np.arange(cfg.episode_steps) / cfg.episode_steps)

    def test_rollout_matches_stepping(self):
        cfg = tiny()
        lam = lambda s, t: 1.0 + 4.0 * s[:, 1] + 0.1 * t
        ro = rollout(cfg, [3, 9], lam, chunk=1)
        for e, seed in enumerate([3, 9]):
            w = init_episode(cfg, seed)
            for t in range(cfg.episode_steps):
                s = w.state().as_array()
                np.testing.assert_array_equal(ro.states[e, t], s)
                _, out = env_step(w, float(lam(s[None], t)[0]))
                assert ro.rewards[e, t] == out.reward
                assert ro.spends[e, t] == out.spend


class TestConfigFile:
    def test_round_trip(self):
        cfg = tiny(reserve_price=0.25, learner_budget=2000.0)
        assert parse_config_text(format_config(cfg)) == cfg

    def test_comments_and_ranges(self):
        cfg = parse_config_text("# desk\nnum_advertisers = 4\nimpressions_per_step = 10, 20  # narrow\n")
        assert cfg.num_advertisers == 4 and cfg.impressions_per_step == (10, 20)

    def test_bad_line_named(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_config_text("episode_steps = 4\nnot_a_key = 1\n")

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            replace(WorldConfig(), lambda_range=(0.0, 1.0))
        with pytest.raises(ValueError):
            WorldConfig(episode_steps=0)


def test_auction_log_csv(tmp_path):
    cfg = tiny()
    w = init_episode(cfg, 0, log_auctions=True)
    env_step(w, 3.0)
    write_auction_log(w, tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "impression_index", "winner_id", "price", "value"]
    assert len(rows) == 1 + w.counts[0]
