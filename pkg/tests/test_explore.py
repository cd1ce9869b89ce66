import numpy as np
import pytest

from selinfer.data import FeatureVector
from selinfer.explore import build_path, build_paths, explore, path_seeds, score_path, step_probabilities
from selinfer.hashing import mix_seed
from selinfer.model import Backbone, sigmoid

from conftest import linear_model


def naive_paths(kept, w, t_steps, n_paths, rng):
    """Step-by-step simulation of the renormalized Bernoulli process, one path at a time."""
    counts = np.zeros(len(kept))
    idx = [i for i in range(len(kept)) if kept[i]]
    for _ in range(n_paths):
        chosen = set()
        for _ in range(t_steps):
            cand = [i for i in idx if i not in chosen]
            if not cand:
                break
            total = sum(w[i] for i in cand)
            probs = [w[i] / total if total > 0 else 1.0 / len(cand) for i in cand]
            draws = rng.random(len(cand))
            chosen.update(i for i, p, d in zip(cand, probs, draws) if d < p)
        if not chosen:
            chosen = {max(idx, key=lambda i: (w[i], -i))}
        for i in chosen:
            counts[i] += 1
    return counts / n_paths


def seeds(n, base=0):
    return np.array([mix_seed(base, 7, j) for j in range(1, n + 1)], dtype=np.uint64)


class TestStepProbabilities:
    def test_renormalized(self):
        p = step_probabilities(np.array([0.3, 0.1]), np.array([True, True]))
        np.testing.assert_allclose(p, [0.75, 0.25], atol=1e-12)

    def test_zero_weights_uniform(self):
        p = step_probabilities(np.array([0.0, 0.0, 0.0]), np.array([True, True, False]))
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0])

    def test_only_candidates(self):
        p = step_probabilities(np.array([0.2, 0.2, 0.6]), np.array([True, False, True]))
        np.testing.assert_allclose(p, [0.25, 0.0, 0.75])


class TestBuildPath:
    def test_single_kept_field(self):
        for s in range(50):
            sel, _ = build_path([False, True, False], [0.0, 0.4, 0.0], 10, s)
            assert sel.tolist() == [False, True, False]

    def test_subset_law_and_nonempty(self):
        rng = np.random.default_rng(0)
        kept = rng.random((2000, 12)) < 0.6
        kept[~kept.any(axis=1), 0] = True
        w = rng.random((2000, 12))
        sel, forced = build_paths(kept, w, 3, seeds(2000))
        assert np.all(sel <= kept)
        assert np.all(sel.any(axis=1))
        assert np.all(sel[forced].sum(axis=1) == 1)

    def test_forced_path_takes_argmax(self):
        # tiny probabilities with one round: most paths come out empty and are rescued
        kept = np.ones((500, 2), bool)
        w = np.tile([1e-3, 1.0], (500, 1))
        sel, forced = build_paths(kept, w, 1, seeds(500))
        assert forced.any()
        assert np.all(sel[forced] == [False, True])

    def test_deterministic(self):
        a = build_path(np.ones(20, bool), np.linspace(0.1, 1, 20), 10, 12345)
        b = build_path(np.ones(20, bool), np.linspace(0.1, 1, 20), 10, 12345)
        assert np.array_equal(a[0], b[0])

    @pytest.mark.parametrize("weights", ["uniform", "skewed"])
    def test_matches_naive_oracle(self, weights):
        n_paths, n_fields = 100_000, 10
        w = np.ones(n_fields) if weights == "uniform" else np.linspace(0.05, 1.0, n_fields)
        kept = np.ones(n_fields, bool)
        sel, _ = build_paths(np.tile(kept, (n_paths, 1)), np.tile(w, (n_paths, 1)), 10, seeds(n_paths, base=3))
        ours = sel.mean(axis=0)
        oracle = naive_paths(kept.tolist(), w.tolist(), 10, 20_000, np.random.default_rng(1))
        se = np.sqrt(oracle * (1 - oracle) / 20_000 + ours * (1 - ours) / n_paths)
        assert np.all(np.abs(ours - oracle) <= 3 * se + 1e-12)

    def test_inclusion_ordering(self):
        n = 50_000
        w = np.array([0.1, 0.4, 0.9])
        sel, _ = build_paths(np.ones((n, 3), bool), np.tile(w, (n, 1)), 2, seeds(n, base=9))
        freq = sel.mean(axis=0)
        se = np.sqrt(freq * (1 - freq) / n)
        assert freq[0] + 3 * se[0] < freq[1] and freq[1] + 3 * se[1] < freq[2]

    def test_early_stop_equivalence(self):
        # with all candidates selected, extra steps cannot change the result
        kept = np.ones((1000, 3), bool)
        w = np.tile([1.0, 1.0, 1.0], (1000, 1))
        a, _ = build_paths(kept, w, 50, seeds(1000))
        b, _ = build_paths(kept, w, 500, seeds(1000))
        assert np.array_equal(a, b)


class TestExplore:
    def test_zero_paths(self):
        assert explore(linear_model([1.0], 0.0), FeatureVector((1,)), [True], [1.0], 0, 10, 0, 1) == []

    def test_ordered_and_seeded(self):
        m = Backbone([40] * 20, seed=0)
        x = FeatureVector(tuple(range(20)), instance_id=5)
        w = np.linspace(0.2, 1.0, 20)
        paths = explore(m, x, np.ones(20, bool), w, 8, 10, base_seed=3)
        assert [p.path_index for p in paths] == list(range(1, 9))
        assert [p.rng_seed for p in paths] == [int(s) for s in path_seeds(3, 5, 8)]
        again = explore(m, x, np.ones(20, bool), w, 8, 10, base_seed=3)
        assert all(np.array_equal(a.selected, b.selected) and a.prediction == b.prediction
                   for a, b in zip(paths, again))

    def test_diversity(self):
        m = linear_model([0.1] * 20, 0.0)
        w = np.linspace(0.2, 1.0, 20)
        fails = 0
        for trial in range(1000):
            x = FeatureVector(tuple(range(20)), instance_id=trial)
            paths = explore(m, x, np.ones(20, bool), w, 8, 10, base_seed=0)
            if len({tuple(p.selected) for p in paths}) < 2:
                fails += 1
        assert fails <= 1

    def test_score_path_identities(self):
        m = linear_model([0.5, -0.25], 0.1)
        x = FeatureVector((1, 2))
        assert score_path(m, x, [True, True]) == sigmoid(0.35)
        assert score_path(m, x, [True, False]) == pytest.approx(sigmoid(0.6), abs=1e-15)
        assert score_path(m, x, [True, False]) == score_path(m, x, np.array([True, False]))
