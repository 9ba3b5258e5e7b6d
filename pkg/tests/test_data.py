import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from autobid.data import (
    Dataset, DatasetFormatError, WeightTable, WeightedSampler, load, merge, save, trajectory_return,
)
from autobid.env import desk_config, rollout


def make_dataset(n=3, T=4, seed=0):
    ro = rollout(desk_config(episode_steps=T), np.arange(seed, seed + n), lambda s, t: 2.0 + 3.0 * s[:, 1])
    return Dataset.from_rollouts(ro, "psn", 0.05, [f"h{i}" for i in range(n)])


def toy_dataset(n, T):
    """Dataset with arbitrary contents; only the shape matters."""
    return Dataset(np.arange(n), np.arange(n), np.zeros((n, T, 3)), np.ones((n, T)), np.ones((n, T)),
                   np.zeros((n, T, 3)))


class TestReturn:
    def test_all_ones(self):
        assert trajectory_return(np.ones(96), 1.0) == 96.0

    def test_all_zero(self):
        assert trajectory_return(np.zeros(10), 0.9) == 0.0

    def test_discounted(self):
        assert trajectory_return([1.0, 2.0, 4.0], 0.5) == 3.0

    def test_gamma_domain(self):
        with pytest.raises(ValueError):
            trajectory_return([1.0], 1.5)

    def test_dataset_returns(self):
        D = make_dataset()
        np.testing.assert_allclose(D.returns(), [trajectory_return(tr) for tr in D], rtol=1e-13)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        D = make_dataset()
        save(D, tmp_path / "d.csv")
        assert load(tmp_path / "d.csv") == D

    @settings(max_examples=20, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-1e300, 1e300)),
           arrays(np.float64, (2, 3, 3), elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_round_trip_bit_exact(self, tmp_path_factory, rewards, states):
        D = Dataset([5, 5], [0, 1], states, rewards * 0.5, rewards, states[:, ::-1], ["asn", "none"],
                    [0.3, 0.0], ["a", ""])
        p = tmp_path_factory.mktemp("rt") / "d.csv"
        save(D, p)
        back = load(p)
        assert back == D
        assert back.rewards.tobytes() == D.rewards.tobytes()

    def test_missing_column(self, tmp_path):
        D = make_dataset(1, 2)
        save(D, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        cut = [",".join(line.split(",")[:-1]) for line in lines[1:]]
        (tmp_path / "bad.csv").write_text("\n".join([lines[0]] + cut) + "\n")
        with pytest.raises(DatasetFormatError, match="theta_hash"):
            load(tmp_path / "bad.csv")

    def test_bad_field_named(self, tmp_path):
        D = make_dataset(1, 2)
        save(D, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        fields = lines[3].split(",")
        fields[7] = "abc"
        lines[3] = ",".join(fields)
        (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=r":4: .* field r"):
            load(tmp_path / "bad.csv")

    def test_empty(self, tmp_path):
        save(Dataset.empty(4), tmp_path / "e.csv")
        assert len((tmp_path / "e.csv").read_text().splitlines()) == 2
        assert len(load(tmp_path / "e.csv")) == 0


class TestStructure:
    def test_chain_consistency(self):
        assert make_dataset(5, 6).chain_consistent()

    def test_transitions(self):
        tr = make_dataset(1, 5)[0]
        ts = tr.transitions()
        assert [t.t for t in ts] == list(range(5))
        assert [t.done for t in ts] == [False] * 4 + [True]
        for a, b in zip(ts, ts[1:]):
            assert a.s_next == b.s

    def test_merge_sorted(self):
        a, b = make_dataset(2, 3, seed=10), make_dataset(2, 3, seed=0)
        m = merge([a, b])
        assert list(m.campaign_id) == [0, 1, 10, 11]
        assert m.subset([2, 3]) == a.subset([0, 1])

    def test_provenance(self):
        D = make_dataset()
        assert D[1].noise_kind == "psn" and D[1].sigma == 0.05 and D[1].theta_hash == "h1"


class TestWeightTable:
    def test_normalisation_enforced(self):
        with pytest.raises(ValueError):
            WeightTable(np.full((2, 2), 0.3))
        with pytest.raises(ValueError):
            WeightTable(np.array([[1.5, -0.5]]))

    def test_csv(self, tmp_path):
        D = make_dataset(2, 3)
        WeightTable.uniform(D).to_csv(D, tmp_path / "w.csv")
        lines = (tmp_path / "w.csv").read_text().splitlines()
        assert lines[0] == "episode_id,t,w" and len(lines) == 7


class TestSampler:
    def test_uniform_frequencies(self):
        # oracle: each count is Binomial(n, 1/K); 3 sigma bounds per cell
        D = toy_dataset(5, 4)
        n, K = 1_000_000, 20
        counts = np.bincount(WeightedSampler(D, WeightTable.uniform(D), seed=1).sample(n), minlength=K)
        p = 1.0 / K
        assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))

    def test_degenerate(self):
        D = toy_dataset(3, 2)
        w = np.zeros((3, 2))
        w[1, 1] = 1.0
        assert np.all(WeightedSampler(D, WeightTable(w), seed=0).sample(10_000) == 3)

    def test_three_to_one(self):
        D = toy_dataset(2, 1)
        counts = np.bincount(WeightedSampler(D, WeightTable([[0.75], [0.25]]), seed=2).sample(1_000_000))
        assert abs(counts[0] / counts[1] - 3.0) <= 0.02 * 3.0

    def test_deterministic(self):
        D = toy_dataset(4, 3)
        w = WeightTable.uniform(D)
        assert np.array_equal(WeightedSampler(D, w, 7).sample(100), WeightedSampler(D, w, 7).sample(100))

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            WeightedSampler(toy_dataset(3, 2), WeightTable.uniform(toy_dataset(2, 2)))

    def test_transition_stream(self):
        D = make_dataset(2, 3)
        it = iter(WeightedSampler(D, WeightTable.uniform(D), seed=0))
        tr = next(it)
        assert tr.campaign_id in (0, 1) and 0 <= tr.t < 3
