import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import auc_bruteforce
from syndi import auc, evaluate, scaled_brier, sse
from syndi.errors import ValidationError


class TestAuc:
    def test_perfect_separation(self):
        y = np.array([0, 0, 1, 1.0])
        p = np.array([0.1, 0.2, 0.8, 0.9])
        assert auc(y, p) == 1.0

    def test_all_scores_equal(self):
        y = np.array([0, 1, 0, 1.0])
        p = np.full(4, 0.5)
        assert auc(y, p) == 0.5

    def test_matches_bruteforce(self, rng):
        y = (rng.random(200) < 0.4).astype(float)
        p = np.round(rng.random(200), 2)  # rounding forces ties
        assert abs(auc(y, p) - auc_bruteforce(y, p)) < 1e-12

    def test_single_class_rejected(self):
        with pytest.raises(ValidationError):
            auc(np.ones(5), np.linspace(0, 1, 5))

    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
    @settings(max_examples=25, deadline=None)
    def test_invariant_under_increasing_transform(self, seed, scale):
        rng = np.random.default_rng(seed)
        y = np.concatenate([np.zeros(10), np.ones(10)])
        p = rng.random(20)
        transformed = np.exp(scale * p)
        assert auc(y, p) == auc(y, transformed)

    def test_complement_identity(self, rng):
        y = (rng.random(100) < 0.5).astype(float)
        y[:2] = [0, 1]  # both classes
        p = rng.random(100)  # ties have measure zero
        assert abs(auc(y, p) + auc(y, -p) - 1.0) < 1e-12


class TestScaledBrier:
    def test_mean_predictor_scores_one(self):
        y = np.array([0, 0, 1, 1, 1.0])
        p = np.full(5, y.mean())
        assert scaled_brier(y, p) == 1.0

    def test_perfect_predictions_score_zero(self):
        y = np.array([0, 1, 1.0])
        assert scaled_brier(y, y) == 0.0

    def test_hand_case(self):
        y = np.array([0.0, 1.0])
        p = np.array([0.25, 0.75])
        assert abs(scaled_brier(y, p) - 0.25) < 1e-15

    def test_degenerate_outcome_rejected(self):
        with pytest.raises(ValidationError):
            scaled_brier(np.ones(4), np.full(4, 0.5))

    def test_constant_predictors_minimized_at_mean(self, rng):
        y = (rng.random(60) < 0.3).astype(float)
        at_mean = scaled_brier(y, np.full(60, y.mean()))
        for c in (0.1, 0.25, 0.4, 0.6, 0.9):
            assert scaled_brier(y, np.full(60, c)) >= at_mean - 1e-12


class TestSse:
    def test_exact_match(self):
        p = np.linspace(0.1, 0.9, 7)
        assert sse(p, p) == 0.0

    def test_constant_offset(self):
        p = np.full(100, 0.5)
        assert abs(sse(p + 0.1, p) - 0.01) < 1e-15

    def test_matches_direct_summation(self, rng):
        a = rng.random(500)
        b = rng.random(500)
        direct = sum((ai - bi) ** 2 for ai, bi in zip(a, b)) / 500
        assert abs(sse(a, b) - direct) < 1e-15


class TestEvaluate:
    def test_report_fields(self, rng):
        y = (rng.random(50) < 0.5).astype(float)
        y[:2] = [0, 1]
        p = rng.random(50)
        p0 = rng.random(50)
        rep = evaluate(y, p, p0)
        assert rep.n_test == 50
        assert rep.sse is not None
        assert abs(rep.sse_sum - rep.sse * 50) < 1e-12
        d = rep.to_dict()
        assert set(d) == {"auc", "scaled_brier", "n_test", "sse", "sse_sum"}

    def test_report_without_truth(self, rng):
        y = (rng.random(50) < 0.5).astype(float)
        y[:2] = [0, 1]
        rep = evaluate(y, rng.random(50))
        assert rep.sse is None
        assert "sse" not in rep.to_dict()
