import math

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st
from hypothesis.extra.numpy import arrays

from core.error_handler import DomainError, ShapeMismatchError
from services.sequence_space import (EUCLIDEAN, INPUT_METRIC, BaseMetric, PathPair, PathWindow, default_horizon,
                                     input_window_dist, make_weights, product_dist, shifted_weighted_sum,
                                     state_seq_dist, window_dist_batch)

finite = st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False)


def windows(horizon=6, dim=2):
    return arrays(np.float64, (horizon, dim), elements=finite).map(PathWindow)


class TestWeights:
    def test_gamma_two_horizon_three(self):
        w = make_weights(2.0, 3)
        np.testing.assert_allclose(w.weights, [0.5, 0.25, 0.125])
        assert w.tail_mass == 0.125

    def test_tail_mass_power(self):
        assert make_weights(1.5, 10).tail_mass == pytest.approx(1.5 ** -10, rel=1e-14)
        assert make_weights(1.5, 10).tail_mass == pytest.approx(0.017341, abs=1e-6)

    @given(st.floats(min_value=1.001, max_value=20.0), st.integers(min_value=1, max_value=200))
    def test_weights_and_tail_sum_to_one(self, gamma, horizon):
        w = make_weights(gamma, horizon)
        assert abs(w.weights.sum() + w.tail_mass - 1.0) < 1e-12
        assert np.all(w.weights > 0)
        assert np.all(np.diff(w.weights) < 0)

    def test_growth_constant_is_gamma(self):
        assert make_weights(1.25, 8).growth_constant == 1.25

    def test_weights_are_read_only(self):
        w = make_weights(2.0, 4)
        with pytest.raises(ValueError):
            w.weights[0] = 1.0

    @pytest.mark.parametrize("gamma, horizon", [(1.0, 5), (0.5, 5), (math.inf, 5), (2.0, 0), (2.0, 2.5)])
    def test_invalid_parameters(self, gamma, horizon):
        with pytest.raises(DomainError):
            make_weights(gamma, horizon)

    def test_default_horizon(self):
        assert default_horizon(1.5) == 35
        assert default_horizon(2.0) == 20
        T = default_horizon(1.25, 1e-6)
        assert 1.25 ** -T < 1e-6 <= 1.25 ** -(T - 1)


class TestWindowDistances:
    def test_identical_windows(self):
        a = PathWindow(np.arange(6.0).reshape(3, 2))
        assert state_seq_dist(a, a, make_weights(2.0, 3)) == 0.0

    def test_constant_gap(self):
        w = make_weights(2.0, 3)
        assert state_seq_dist(PathWindow(np.zeros(3)), PathWindow(np.ones(3)), w) == pytest.approx(0.875)

    @given(windows(), windows())
    def test_bounded_by_worst_entry(self, a, b):
        w = make_weights(1.7, 6)
        worst = float(np.max(EUCLIDEAN.pointwise(a.values, b.values)))
        assert state_seq_dist(a, b, w) <= worst * (1.0 - w.tail_mass) + 1e-9

    @given(windows(), windows(), windows())
    @hyp_settings(max_examples=100)
    def test_metric_axioms(self, a, b, c):
        w = make_weights(1.3, 6)
        ab, ba = state_seq_dist(a, b, w), state_seq_dist(b, a, w)
        assert ab >= 0
        assert ab == pytest.approx(ba, abs=1e-12)
        assert state_seq_dist(a, c, w) <= ab + state_seq_dist(b, c, w) + 1e-12 * (1 + ab)

    def test_horizon_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            state_seq_dist(PathWindow(np.zeros(3)), PathWindow(np.zeros(3)), make_weights(2.0, 4))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            state_seq_dist(PathWindow(np.zeros((3, 1))), PathWindow(np.zeros((3, 2))), make_weights(2.0, 3))

    def test_non_finite_window_rejected(self):
        with pytest.raises(DomainError):
            PathWindow([0.0, np.nan])

    def test_at_time(self):
        window = PathWindow([10.0, 20.0, 30.0])
        assert window.at_time(-1)[0] == 10.0
        assert window.at_time(-3)[0] == 30.0
        with pytest.raises(DomainError):
            window.at_time(0)

    def test_input_metric_is_capped(self):
        w = make_weights(2.0, 3)
        far = input_window_dist(PathWindow(np.zeros(3)), PathWindow(np.full(3, 100.0)), w)
        assert far == pytest.approx(1.0 - w.tail_mass)

    def test_diag_scaled_metric(self):
        metric = BaseMetric.diag_scaled([0.01, 1.0])
        assert float(metric.pointwise(np.array([1.0, 0.0]), np.zeros(2))) == pytest.approx(0.01)
        with pytest.raises(DomainError):
            BaseMetric.diag_scaled([0.0, 1.0])

    def test_batch_matches_single(self, rng):
        w = make_weights(1.5, 5)
        a = rng.standard_normal((4, 5, 2))
        b = rng.standard_normal((4, 5, 2))
        batch = window_dist_batch(a, b, w)
        for i in range(4):
            assert batch[i] == pytest.approx(state_seq_dist(PathWindow(a[i]), PathWindow(b[i]), w), abs=1e-14)


class TestProductDistance:
    def test_identical_pairs(self):
        pair = PathPair(PathWindow(np.ones(4)), PathWindow(np.zeros(4)))
        assert product_dist(pair, pair, make_weights(2.0, 4)) == 0.0

    def test_input_only_difference(self):
        w = make_weights(2.0, 4)
        state = PathWindow(np.ones(4))
        u1, u2 = PathWindow([0.0, 0.2, 0.0, 0.3]), PathWindow([0.1, 0.0, 0.0, 0.0])
        assert product_dist(PathPair(state, u1), PathPair(state, u2), w) == pytest.approx(
            input_window_dist(u1, u2, w, INPUT_METRIC))

    def test_triangle_on_random_triples(self, rng):
        w = make_weights(1.4, 8)

        def pair():
            return PathPair(PathWindow(rng.standard_normal((8, 2))), PathWindow(rng.standard_normal((8, 1)) * 3))

        for _ in range(100):
            a, b, c = pair(), pair(), pair()
            assert product_dist(a, c, w) <= product_dist(a, b, w) + product_dist(b, c, w) + 1e-12

    def test_pair_horizons_must_agree(self):
        with pytest.raises(ShapeMismatchError):
            PathPair(PathWindow(np.zeros(3)), PathWindow(np.zeros(4)))


class TestShiftBound:
    @given(arrays(np.float64, 12, elements=st.floats(min_value=0, max_value=10)),
           st.integers(min_value=0, max_value=11), st.floats(min_value=1.05, max_value=4.0))
    def test_shifted_sum_grows_at_most_gamma_power(self, alpha, n, gamma):
        w = make_weights(gamma, 12)
        bound = gamma ** n * float(np.sum(w.weights * alpha))
        assert shifted_weighted_sum(alpha, w, n) <= bound * (1 + 1e-12) + 1e-12

    def test_negative_alpha_rejected(self):
        with pytest.raises(DomainError):
            shifted_weighted_sum(-np.ones(3), make_weights(2.0, 3), 1)
