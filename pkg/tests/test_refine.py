import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selinfer.data import FeatureVector
from selinfer.errors import DataError, ParameterError
from selinfer.model import Backbone, sigmoid
from selinfer.refine import composite_scores, filter_fields, normalize_attributions, refined_prediction

from conftest import linear_model


class TestCompositeScores:
    def test_example(self):
        # attr_norm 0.25 for field 0 (field 1 holds the max)
        s = composite_scores([1.0, 4.0], [0.5, 0.0], 0.4)
        assert s.attr_norm[0] == pytest.approx(0.25)
        assert s.w[0] == pytest.approx(0.4 * 0.5 + 0.6 * 0.25, abs=1e-12)
        assert s.w[0] == pytest.approx(0.35, abs=1e-12)

    def test_beta_one_is_frequency(self):
        freqs = np.array([0.1, 0.7, 0.33])
        np.testing.assert_array_equal(composite_scores([5.0, 1.0, 2.0], freqs, 1.0).w, freqs)

    def test_max_normalization(self):
        np.testing.assert_allclose(normalize_attributions([4.0, 2.0, 0.0], [True] * 3), [1.0, 0.5, 0.0])

    def test_all_zero_attr(self):
        np.testing.assert_array_equal(normalize_attributions([0.0, 0.0], [True, True]), [0.0, 0.0])

    def test_absent_is_nan(self):
        s = composite_scores([1.0, 9.0], [0.5, 0.5], 0.4, present=[True, False])
        assert np.isnan(s.w[1])
        assert s.attr_norm[0] == 1.0

    def test_bad_beta(self):
        with pytest.raises(ParameterError):
            composite_scores([1.0], [1.0], 1.2)

    @given(arrays(np.float64, 5, elements=st.floats(0, 100)), arrays(np.float64, 5, elements=st.floats(0, 1)),
           st.floats(0, 1))
    def test_range(self, attr, freqs, beta):
        s = composite_scores(attr, freqs, beta)
        assert np.all((s.w >= -1e-15) & (s.w <= 1 + 1e-12))


class TestFilter:
    def test_all_pass(self):
        kept, guard = filter_fields([0.6, 0.7], [0.5, 0.5], [True, True])
        assert kept.tolist() == [True, True] and not guard

    def test_partial(self):
        kept, guard = filter_fields([0.1, 0.9], [0.5, 0.5], [True, True])
        assert kept.tolist() == [False, True] and not guard

    def test_safeguard(self):
        kept, guard = filter_fields([0.1, 0.2], [0.5, 0.5], [True, True])
        assert kept.tolist() == [False, True] and guard

    def test_safeguard_tie_lowest_index(self):
        kept, _ = filter_fields([0.2, 0.2, np.nan], [0.5, 0.5, 0.5], [True, True, False])
        assert kept.tolist() == [True, False, False]

    def test_boundary_retained(self):
        kept, _ = filter_fields([0.5, 0.4], [0.5, 0.5], [True, True])
        assert kept.tolist() == [True, False]

    def test_absent_never_kept(self):
        kept, _ = filter_fields([np.nan, 0.9], [0.0, 0.0], [False, True])
        assert kept.tolist() == [False, True]

    def test_batch(self):
        w = np.array([[0.1, 0.9], [0.1, 0.2]])
        kept, guard = filter_fields(w, [0.5, 0.5], np.ones((2, 2), bool))
        assert kept.tolist() == [[False, True], [False, True]]
        assert guard.tolist() == [False, True]

    @given(arrays(np.float64, 6, elements=st.floats(0, 1)), arrays(np.float64, 6, elements=st.floats(0, 1)),
           arrays(np.float64, 6, elements=st.floats(0, 1)), st.floats(0.01, 0.99))
    def test_conservative(self, freqs, attr, taus, beta):
        """A field is dropped only when both terms are low."""
        s = composite_scores(attr, freqs, beta)
        kept, _ = filter_fields(s.w, taus, np.ones(6, bool))
        for i in range(6):
            if beta * freqs[i] >= taus[i] or (1 - beta) * s.attr_norm[i] >= taus[i]:
                assert kept[i]
        assert kept.any()

    @given(arrays(np.float64, 4, elements=st.floats(0, 1)), arrays(np.float64, 4, elements=st.floats(0, 1)))
    def test_never_empty_and_idempotent(self, w, taus):
        kept, _ = filter_fields(w, taus, np.ones(4, bool))
        again, _ = filter_fields(np.where(kept, w, np.nan), taus, kept)
        assert again.any()
        assert np.all(again <= kept)


class TestRefinedPrediction:
    def test_identity_when_all_kept(self):
        m = linear_model([0.5, -0.25], 0.1)
        r = refined_prediction(m, FeatureVector((1, 2)), [True, True])
        assert r.refined_logit == pytest.approx(0.35)
        assert r.refined_prob == sigmoid(r.refined_logit)

    def test_single_field_hand_value(self):
        m = linear_model([0.5, -0.25], 0.1)
        r = refined_prediction(m, FeatureVector((1, 2)), [False, True])
        assert r.refined_logit == pytest.approx(0.1 - 0.25, abs=1e-15)

    def test_dropped_field_has_no_influence(self):
        m = Backbone([50] * 3, dim=4, seed=0)
        a = refined_prediction(m, FeatureVector((1, 2, 3)), [True, True, False])
        b = refined_prediction(m, FeatureVector((1, 2, 49)), [True, True, False])
        c = refined_prediction(m, FeatureVector((1, 2, 49)), [True, True, True])
        assert a.refined_logit == b.refined_logit
        assert c.refined_logit != b.refined_logit

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            refined_prediction(linear_model([1.0], 0.0), FeatureVector((1,)), [False])
