import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

import services.dynamics_service as dynamics_service
from core.error_handler import CertificationError, DomainError
from services.certificate_service import Certificate, check_theorem_condition, pointwise_lipschitz
from services.dynamics_service import (ConvergenceTrace, StepRecord, consistency_check, consistency_report,
                                       continuity_probe, converge_fixed_point, deterministic_filter,
                                       envelope_holds, ergodic_mean, fit_decay_rate, garch_series_filter,
                                       iterate_fc, self_consistency_distance, stationarity_check,
                                       uniqueness_probe)
from services.input_service import CausalFilter, Ensemble, HiddenSampler, generate_inputs
from services.sequence_space import PathWindow, make_weights, state_seq_dist, window_dist_batch
from services.state_models import EsnModel, GarchModel, LinearTestModel
from services.wasserstein_service import OTResult


def constant_inputs(value: float, n_paths: int, horizon: int) -> Ensemble:
    return Ensemble(inputs=np.full((n_paths, horizon, 1), value))


def collapsed_transport(*args, **kwargs) -> OTResult:
    """A Sinkhorn result whose plan lost its mass: tiny distance, marginals far off"""
    return OTResult(distance=1e-6, p=1.0, method="sinkhorn", plan_cost=1e-6, iterations=2000,
                    marginal_err=1.99, converged=False, reg=0.02)


class TestIterateFc:
    def test_zero_steps_keeps_anchor(self, linear_model, linear_inputs):
        out = iterate_fc(linear_model, linear_inputs, 0)
        assert np.array_equal(out.states, np.zeros(linear_inputs.inputs.shape))
        assert out.inputs is linear_inputs.inputs

    def test_constant_input_halves_gap(self, linear_model):
        inputs = constant_inputs(1.0, 4, 20)
        gaps = [abs(iterate_fc(linear_model, inputs, n).states[0, 0, 0] - 2.0) for n in range(1, 10)]
        np.testing.assert_allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.5)

    def test_garch_matches_series_truncation(self, garch_model, normal_sampler):
        inputs = generate_inputs(normal_sampler, CausalFilter.identity(), 64, 12, threads=1)
        out = iterate_fc(garch_model, inputs, 12)
        np.testing.assert_allclose(out.states, garch_series_filter(garch_model, inputs.inputs), rtol=1e-14)

    def test_negative_steps(self, linear_model, linear_inputs):
        with pytest.raises(DomainError):
            iterate_fc(linear_model, linear_inputs, -1)

    @pytest.mark.parametrize("a", [0.3, 0.5, -0.6])
    def test_coupled_paths_contract_at_a_gamma(self, a, small_weights):
        model = LinearTestModel(a=a)
        inputs = generate_inputs(HiddenSampler(seed=13), CausalFilter.identity(), 64, 35, threads=1)
        other = np.random.Generator(np.random.Philox(13)).uniform(-3.0, 3.0, (64, 35, 1))
        start = window_dist_batch(np.zeros((64, 35, 1)), other, small_weights)
        rate = abs(a) * small_weights.gamma
        for n in (1, 4, 10):
            x = iterate_fc(model, inputs, n).states
            y = iterate_fc(model, inputs, n, start_states=other).states
            assert np.all(window_dist_batch(x, y, small_weights) <= rate ** n * start * (1 + 1e-12) + 1e-13)

    @given(omega=st.floats(0.01, 1.0), alpha=st.floats(0.0, 0.5), beta=st.floats(0.0, 0.45),
           seed=st.integers(0, 2 ** 32 - 1))
    @hyp_settings(max_examples=30, deadline=None)
    def test_garch_states_stay_positive(self, omega, alpha, beta, seed):
        model = GarchModel(omega=omega, alpha=alpha, beta=beta)
        sampler = HiddenSampler(dist="student_t", nu=3.0, scale=10.0, seed=seed)
        inputs = generate_inputs(sampler, CausalFilter.identity(), 16, 20, threads=1)
        states = iterate_fc(model, inputs, 40).states
        assert np.all(np.isfinite(states))
        assert np.all(states >= omega)

    def test_esn_states_bounded_for_large_inputs(self):
        model = EsnModel(A=np.array([[0.5, -0.4], [0.3, 0.2]]), C=np.array([[50.0], [-80.0]]), b=np.array([0.1, 0.0]))
        sampler = HiddenSampler(dist="student_t", nu=2.0, scale=1e3, seed=14)
        inputs = generate_inputs(sampler, CausalFilter.identity(), 32, 12, threads=1)
        states = iterate_fc(model, inputs, 15).states
        assert np.max(np.abs(states)) <= 1.0
        assert np.max(np.abs(states)) > 0.99


class TestConvergence:
    def test_linear_contraction(self, linear_model, linear_inputs, small_weights):
        fp = converge_fixed_point(linear_model, linear_inputs, small_weights, p=1, tol=1e-3, threads=1)
        trace = fp.trace
        assert trace.converged and not trace.saturated
        assert trace.fitted_q <= 0.5 * 1.5 + 0.05
        assert envelope_holds(trace, trace.fitted_q, trace.fitted_Q, 0.2)
        assert self_consistency_distance(linear_model, fp, small_weights) < 2e-3

    def test_expanding_map_does_not_converge(self, linear_inputs, small_weights):
        fp = converge_fixed_point(LinearTestModel(a=1.1), linear_inputs, small_weights, tol=1e-3,
                                  max_steps=20, ot_every=0, threads=1)
        steps = [r.wp_step for r in fp.trace.steps]
        assert not fp.trace.converged
        assert len(steps) == 20
        assert all(b >= a for a, b in zip(steps, steps[1:]))

    def test_stop_after_horizon_is_saturation(self, linear_model):
        inputs = generate_inputs(HiddenSampler(seed=1), CausalFilter.identity(), 32, 3, threads=1)
        fp = converge_fixed_point(linear_model, inputs, make_weights(2.0, 3), tol=1e-300, ot_every=0)
        assert fp.trace.saturated
        assert not fp.trace.converged

    def test_certified_mode_requires_passed_theorem(self, linear_model, linear_inputs, small_weights):
        with pytest.raises(CertificationError):
            converge_fixed_point(linear_model, linear_inputs, small_weights, certified=True)
        failed = check_theorem_condition(0.9, 1.5, 1)
        with pytest.raises(CertificationError):
            converge_fixed_point(linear_model, linear_inputs, small_weights, certificate=failed, certified=True)
        fp = converge_fixed_point(linear_model, linear_inputs, small_weights, certified=True,
                                  certificate=check_theorem_condition(0.5, 1.5, 1))
        assert fp.input_meta["certified"] is True

    def test_threads_do_not_change_results(self, linear_model, small_weights):
        inputs = generate_inputs(HiddenSampler(seed=3), CausalFilter.identity(), 700, small_weights.horizon,
                                 threads=1, chunk=100)
        single = converge_fixed_point(linear_model, inputs, small_weights, threads=1, chunk=100)
        pooled = converge_fixed_point(linear_model, inputs, small_weights, threads=4, chunk=100)
        assert list(single.trace.rows()) == list(pooled.trace.rows())
        assert np.array_equal(single.ensemble.states, pooled.ensemble.states)

    def test_esn_with_contracting_weights(self):
        w = make_weights(1.1, 145)
        model = EsnModel(A=np.diag([0.9, 0.5]), C=np.eye(2), b=np.zeros(2))
        inputs = generate_inputs(HiddenSampler(dim=2, seed=4), CausalFilter.identity(2), 256, w.horizon,
                                 threads=1)
        fp = converge_fixed_point(model, inputs, w, tol=1e-3, ot_every=0, threads=1)
        assert fp.trace.converged
        assert self_consistency_distance(model, fp, w) < 1e-3

    def test_track_to_final(self, linear_model, linear_inputs, small_weights):
        fp = converge_fixed_point(linear_model, linear_inputs, small_weights, track_to_final=True, ot_every=0)
        assert fp.trace.steps[-1].wp_to_final == 0.0
        assert fp.trace.steps[0].wp_to_final > fp.trace.steps[-1].wp_to_final

    def test_unconverged_ot_steps_are_left_blank(self, linear_model, linear_inputs, small_weights, monkeypatch):
        monkeypatch.setattr(dynamics_service, "wasserstein_distance", collapsed_transport)
        fp = converge_fixed_point(linear_model, linear_inputs, small_weights, tol=1e-3, ot_every=2)
        assert fp.trace.converged
        assert fp.trace.ot_rejected > 0
        assert all(r.wp_step_ot is None for r in fp.trace.steps)
        assert all(row[2] == "" for row in fp.trace.rows())


class TestDecayFit:
    def test_exact_geometric(self):
        q, Q = fit_decay_rate(0.3 ** np.arange(20))
        assert q == pytest.approx(0.3, abs=1e-6)
        assert Q == pytest.approx(1.0, rel=1e-6)

    def test_noisy_geometric(self, rng):
        values = 0.6 ** np.arange(30) * (1.0 + 0.05 * rng.uniform(-1, 1, 30))
        assert fit_decay_rate(values)[0] == pytest.approx(0.6, abs=0.02)

    def test_all_zero(self):
        assert fit_decay_rate(np.zeros(6)) == (0.0, 0.0)

    def test_too_few_points(self):
        with pytest.raises(DomainError):
            fit_decay_rate([1.0, 0.5, 0.25])

    def test_envelope_detects_violation(self):
        steps = [StepRecord(n=n, wp_step=0.5 ** n, wp_step_ot=None, mean_state=0.0, var_state=1.0)
                 for n in range(10)]
        trace = ConvergenceTrace(steps=steps, tol=1e-3, p=1.0)
        assert envelope_holds(trace, 0.5, 1.0)
        assert not envelope_holds(trace, 0.4, 1.0)


class TestDeterministicFilter:
    def test_constant_input(self, linear_model, small_weights):
        cert = pointwise_lipschitz(linear_model)
        x = deterministic_filter(linear_model, PathWindow.constant(1.0, 35), small_weights, cert, tol=1e-6)
        # the zero left pad leaves 2 * 0.5^(T-k) at index k, which sums to under 2 gamma^-T
        bound = 1e-6 + 2.0 * small_weights.tail_mass
        assert state_seq_dist(x, PathWindow.constant(2.0, 35), small_weights) < bound

    def test_stops_within_tol_of_windowed_fixed_point(self, linear_model, small_weights):
        cert = pointwise_lipschitz(linear_model)
        u = PathWindow.constant(1.0, 35)
        truncated = PathWindow(np.array([2.0 - 2.0 * 0.5 ** (35 - k) for k in range(35)]))
        for tol in (1e-3, 1e-6):
            x = deterministic_filter(linear_model, u, small_weights, cert, tol=tol)
            assert state_seq_dist(x, truncated, small_weights) < tol

    def test_matches_geometric_series(self, linear_model, small_weights, rng):
        u = rng.standard_normal(35)
        cert = pointwise_lipschitz(linear_model)
        x = deterministic_filter(linear_model, PathWindow(u), small_weights, cert, tol=1e-8)
        closed = np.array([sum(0.5 ** j * u[k + j] for j in range(35 - k)) for k in range(35)])
        assert state_seq_dist(x, PathWindow(closed), small_weights) < 1e-8 + small_weights.tail_mass

    def test_requires_lipschitz_certificate(self, linear_model, small_weights):
        u = PathWindow(np.zeros(35))
        with pytest.raises(CertificationError):
            deterministic_filter(linear_model, u, small_weights, None)
        wrong_kind = Certificate(kind="contractivity", estimate=0.5, passed=True)
        with pytest.raises(CertificationError):
            deterministic_filter(linear_model, u, small_weights, wrong_kind)
        slow = LinearTestModel(a=0.8)
        with pytest.raises(CertificationError):
            deterministic_filter(slow, u, small_weights, pointwise_lipschitz(slow))


class TestConsistency:
    def test_linear_shared_inputs(self, linear_model, small_weights):
        inputs = generate_inputs(HiddenSampler(seed=5), CausalFilter.identity(), 1024, 35, threads=1)
        report = consistency_report(linear_model, inputs, small_weights, certificate=pointwise_lipschitz(linear_model),
                                    tol=1e-3)
        assert report.distance < 5e-3
        assert report.distance <= report.coupled

    def test_one_step_lift(self, small_weights):
        model = LinearTestModel(a=0.0)
        inputs = generate_inputs(HiddenSampler(seed=6), CausalFilter.identity(), 512, 35, threads=1)
        assert consistency_check(model, inputs, small_weights, certificate=pointwise_lipschitz(model),
                                 tol=1e-3) < 2e-3

    def test_garch_series_filter(self, garch_model):
        w = make_weights(1.25, 256)
        inputs = generate_inputs(HiddenSampler(seed=7), CausalFilter.identity(), 512, w.horizon, threads=1)
        report = consistency_report(garch_model, inputs, w, tol=1e-5)
        assert report.coupled < 1e-3

    def test_non_garch_needs_certificate(self, linear_model, linear_inputs, small_weights):
        with pytest.raises(CertificationError):
            consistency_check(linear_model, linear_inputs, small_weights)

    def test_wrong_filter_fails_on_sinkhorn_route(self, linear_model, small_weights):
        inputs = generate_inputs(HiddenSampler(seed=15), CausalFilter.identity(), 300, 35, threads=1)
        report = consistency_report(linear_model, inputs, small_weights,
                                    series_filter=lambda u: np.full(u.shape, 5.0), tol=1e-3, method="sinkhorn")
        assert report.ot_converged
        assert report.coupled > 4.0
        assert report.distance > 1.0

    def test_unconverged_transport_is_never_used(self, linear_model, small_weights, monkeypatch):
        inputs = generate_inputs(HiddenSampler(seed=15), CausalFilter.identity(), 300, 35, threads=1)
        fp = converge_fixed_point(linear_model, inputs, small_weights, tol=1e-3, ot_every=0)
        monkeypatch.setattr(dynamics_service, "wasserstein_distance", collapsed_transport)
        report = consistency_report(linear_model, inputs, small_weights, fixed_point=fp,
                                    series_filter=lambda u: np.full(u.shape, 5.0), tol=1e-3, method="sinkhorn")
        assert not report.ot_converged
        assert report.distance == report.coupled
        assert report.distance > 1.0


class TestStationarity:
    def test_linear_fixed_point_passes(self, linear_model, small_weights):
        inputs = generate_inputs(HiddenSampler(seed=8), CausalFilter.identity(), 8192, 35, threads=1)
        fp = converge_fixed_point(linear_model, inputs, small_weights, ot_every=0)
        report = stationarity_check(fp, max_lag=3)
        assert report.passed, report.statistics

    def test_time_scaled_inputs_fail(self, linear_model, small_weights):
        V = CausalFilter.time_scale(0.2, 2.0)
        inputs = generate_inputs(HiddenSampler(seed=8), V, 8192, 35, threads=1)
        fp = converge_fixed_point(linear_model, inputs, small_weights, ot_every=0)
        assert not stationarity_check(fp).passed

    def test_constant_input_is_trivially_stationary(self, linear_model, small_weights):
        fp = converge_fixed_point(linear_model, constant_inputs(0.0, 16, 35), small_weights, ot_every=0)
        report = stationarity_check(fp)
        assert report.passed
        assert report.max_discrepancy == 0.0


class TestDiagnostics:
    def test_uniqueness_linear(self, linear_model, small_weights):
        inputs = generate_inputs(HiddenSampler(seed=9), CausalFilter.identity(), 512, 35, threads=1)
        report = uniqueness_probe(linear_model, inputs, small_weights, tol=1e-3, seed=9)
        assert report.converged
        assert report.ot_converged
        assert report.distance < 3e-3

    def test_uniqueness_ignores_unconverged_transport(self, linear_model, small_weights, monkeypatch):
        monkeypatch.setattr(dynamics_service, "wasserstein_distance", collapsed_transport)
        inputs = generate_inputs(HiddenSampler(seed=9), CausalFilter.identity(), 64, 35, threads=1)
        start = np.full((64, 35, 1), 3.0)
        report = uniqueness_probe(linear_model, inputs, small_weights, tol=1e-3, start_states=start,
                                  max_steps=2)
        assert not report.ot_converged
        assert report.distance == report.coupled
        assert report.coupled > 1e-3

    def test_continuity_ratio(self, linear_model, small_weights):
        rows = continuity_probe(linear_model, HiddenSampler(seed=10), CausalFilter.identity(), small_weights,
                                shifts=[0.01, 0.1], n_paths=256)
        assert rows[0].output_distance < rows[1].output_distance
        assert all(np.isfinite(r.ratio) for r in rows)

    def test_ergodic_means(self, linear_model, garch_model):
        assert abs(ergodic_mean(linear_model, HiddenSampler(seed=11), 100_000)) < 0.05
        assert ergodic_mean(garch_model, HiddenSampler(seed=12), 400_000) == pytest.approx(1.0, rel=0.1)

    def test_ergodic_mean_needs_memoryless_filter(self, linear_model):
        with pytest.raises(DomainError):
            ergodic_mean(linear_model, HiddenSampler(), 10, V=CausalFilter.fir([1.0, 0.5]))
