import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selinfer.aggregate import aggregate, aggregate_padded
from selinfer.errors import DataError, ParameterError

probs = st.lists(st.floats(0.001, 0.999), min_size=1, max_size=12)


def scalar_oracle(ps, lam):
    mean = sum(ps) / len(ps)
    ws = [math.exp(-lam * abs(p - mean)) for p in ps]
    return sum(w * p for w, p in zip(ws, ps)) / sum(ws), ws, mean


class TestAggregate:
    def test_unanimous(self):
        for lam in (0.0, 5.0, 100.0):
            assert aggregate([0.2, 0.2, 0.2], lam).final == pytest.approx(0.2, abs=1e-15)

    def test_lambda_zero_is_mean(self):
        assert aggregate([0.1, 0.4, 0.7], 0.0).final == pytest.approx(0.4, abs=1e-12)

    def test_worked_example(self):
        r = aggregate([0.1, 0.1, 0.9], 5.0)
        assert r.mean_prediction == pytest.approx(0.3667, abs=1e-4)
        np.testing.assert_allclose(r.weights, [0.2636, 0.2636, 0.0697], atol=1e-3)
        assert r.weights[2] == pytest.approx(math.exp(-5.0 * (0.9 - 1.1 / 3)), abs=1e-15)
        assert r.final == pytest.approx(0.1934, abs=1e-3)
        assert r.final == pytest.approx(scalar_oracle([0.1, 0.1, 0.9], 5.0)[0], abs=1e-12)

    def test_singleton_passthrough(self):
        r = aggregate([0.123456789], 5.0)
        assert r.final == 0.123456789

    def test_errors(self):
        with pytest.raises(DataError):
            aggregate([], 5.0)
        with pytest.raises(DataError):
            aggregate([0.2, float("nan")], 5.0)
        with pytest.raises(ParameterError):
            aggregate([0.2, 0.3], -1.0)

    def test_large_lambda_picks_nearest(self):
        r = aggregate([0.1, 0.35, 0.9], 100.0)
        assert r.final == pytest.approx(0.35, abs=1e-3)

    def test_extreme_lambda_floor(self):
        r = aggregate([0.01, 0.99], 1e6)
        assert np.isfinite(r.final) and np.all(r.weights > 0)

    @given(probs, st.floats(0, 50))
    def test_convex_and_oracle(self, ps, lam):
        r = aggregate(ps, lam)
        assert min(ps) <= r.final <= max(ps)
        if len(ps) > 1:
            assert r.final == pytest.approx(scalar_oracle(ps, lam)[0], abs=1e-9)

    @given(probs, st.floats(0, 50), st.randoms())
    def test_permutation_invariant(self, ps, lam, rnd):
        shuffled = list(ps)
        rnd.shuffle(shuffled)
        assert aggregate(shuffled, lam).final == pytest.approx(aggregate(ps, lam).final, abs=1e-12)

    @given(st.lists(st.floats(0.01, 0.99), min_size=3, max_size=8), st.floats(0.1, 20))
    def test_outlier_smallest_weight(self, ps, lam):
        mean = sum(ps) / len(ps)
        d = [abs(p - mean) for p in ps]
        far = max(range(len(ps)), key=d.__getitem__)
        if sorted(d)[-1] - sorted(d)[-2] > 1e-6:
            w = aggregate(ps, lam).weights
            assert all(w[far] < w[i] for i in range(len(ps)) if i != far)


class TestPadded:
    def test_rows_match_scalar(self):
        rng = np.random.default_rng(0)
        preds = rng.random((200, 9))
        counts = rng.integers(1, 10, size=200)
        final, weights = aggregate_padded(preds, counts, 5.0)
        for b in range(200):
            r = aggregate(preds[b, :counts[b]], 5.0)
            assert final[b] == pytest.approx(r.final, abs=1e-12)
            assert np.all(weights[b, counts[b]:] == 0)

    def test_single_entry_bit_exact(self):
        preds = np.array([[0.3141592653589793, 0.9]])
        final, _ = aggregate_padded(preds, np.array([1]), 5.0)
        assert final[0] == preds[0, 0]
