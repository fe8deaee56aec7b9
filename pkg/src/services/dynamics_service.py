#!/usr/bin/env python3
"""
Dynamics Service - stochesp
Fixed-point iteration of the pushforward of Fc on empirical ensembles.

Key responsibilities:
- Iterate Fc path by path from the constant anchor window (delta_{x0} x Xi)
- Detect convergence on the coupled step distance, with subsampled full OT as a floor
- Fit the geometric decay of the step distances
- Deterministic filters U_f (certified contractions) and the GARCH series filter
- Consistency, stationarity, uniqueness and continuity diagnostics

External dependencies:
- numpy for the ensemble arrays
- services.wasserstein_service for full optimal transport estimates
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.error_handler import CertificationError, DomainError, ErrorHandler, ShapeMismatchError
from core.settings import settings
from core.utilities import ParallelUtilities
from services.certificate_service import Certificate
from services.input_service import CausalFilter, Ensemble, HiddenSampler, generate_inputs
from services.sequence_space import (EUCLIDEAN, INPUT_METRIC, BaseMetric, PathWindow, WeightVector,
                                     product_dist_batch, state_seq_dist, window_dist_batch)
from services.state_models import GarchModel, StateModel, anchor_window, extend_F, extend_states
from services.wasserstein_service import OTResult, wasserstein_distance

logger = logging.getLogger(__name__)
error_handler = ErrorHandler(__name__)


@dataclass(frozen=True)
class StepRecord:
    n: int
    wp_step: float
    wp_step_ot: Optional[float]
    mean_state: float
    var_state: float
    wp_to_final: Optional[float] = None


@dataclass
class ConvergenceTrace:
    steps: List[StepRecord]
    tol: float
    p: float
    converged: bool = False
    saturated: bool = False
    fitted_q: Optional[float] = None
    fitted_Q: Optional[float] = None
    ot_method: str = ""
    ot_rejected: int = 0

    @property
    def n_final(self) -> int:
        return self.steps[-1].n if self.steps else -1

    def rows(self):
        """trace.csv rows: n, coupled step, OT step (blank when not computed), t=-1 mean and variance"""
        for r in self.steps:
            yield (r.n, r.wp_step, "" if r.wp_step_ot is None else r.wp_step_ot, r.mean_state, r.var_state)


TRACE_HEADER = ("n", "wp_step_coupled", "wp_step_ot", "mean_state_t-1", "var_state_t-1")


@dataclass
class FixedPointEstimate:
    ensemble: Ensemble
    trace: ConvergenceTrace
    input_meta: Dict[str, Any] = field(default_factory=dict)


def _resolve(threads: Optional[int], chunk: Optional[int]) -> Tuple[int, int]:
    return (settings.threads if threads is None else max(1, int(threads)),
            settings.path_chunk if chunk is None else max(1, int(chunk)))


def initial_states(model: StateModel, inputs: Ensemble) -> np.ndarray:
    """Constant anchor windows for every path"""
    return np.broadcast_to(model.anchor, (inputs.n_paths, inputs.horizon, model.state_dim)).copy()


def _advance(model: StateModel, states: np.ndarray, inputs: np.ndarray, left_pad,
             threads: int, chunk: int, w: Optional[WeightVector] = None,
             state_metric: BaseMetric = EUCLIDEAN):
    """One Fc step over all paths; optionally the per-path distance to the previous window"""
    def run(start, stop):
        new = extend_states(model, states[start:stop], inputs[start:stop], left_pad)
        if w is None:
            return new, None
        return new, window_dist_batch(new, states[start:stop], w, state_metric)

    parts = ParallelUtilities.map_chunks(run, states.shape[0], chunk, threads)
    new_states = np.concatenate([part[0] for part in parts], axis=0)
    if w is None:
        return new_states, None
    return new_states, np.concatenate([part[1] for part in parts], axis=0)


def _check_model_inputs(model: StateModel, inputs: Ensemble):
    if inputs.input_dim != model.input_dim:
        raise ShapeMismatchError(f"inputs have dim {inputs.input_dim}, model expects {model.input_dim}")


def iterate_fc(model: StateModel, inputs: Ensemble, n_steps: int, start_states: Optional[np.ndarray] = None,
               left_pad=None, threads: Optional[int] = None, chunk: Optional[int] = None) -> Ensemble:
    """n_steps applications of Fc per path; input windows pass through untouched"""
    if n_steps < 0:
        raise DomainError(f"n_steps must be >= 0, got {n_steps}")
    _check_model_inputs(model, inputs)
    threads, chunk = _resolve(threads, chunk)
    states = initial_states(model, inputs) if start_states is None else np.asarray(start_states, dtype=float)
    if states.shape != (inputs.n_paths, inputs.horizon, model.state_dim):
        raise ShapeMismatchError(f"start states shaped {states.shape}, expected "
                                 f"{(inputs.n_paths, inputs.horizon, model.state_dim)}")
    model.check_states(states)
    for _ in range(n_steps):
        states, _ = _advance(model, states, inputs.inputs, left_pad, threads, chunk)
    return inputs.with_states(states)


def _coupled(dists: np.ndarray, p: float) -> float:
    return float(np.mean(dists ** p) ** (1.0 / p)) if p != 1 else float(np.mean(dists))


def _accepted_distance(result: OTResult, operation: str) -> Optional[float]:
    """The OT distance, or None when the solver missed its marginal tolerance"""
    if result.converged and math.isfinite(result.distance):
        return result.distance
    error_handler.log_warning(operation, "transport plan rejected, keeping the coupled distance",
                              {'method': result.method, 'marginal_err': f"{result.marginal_err:.3e}"})
    return None


def _ot_step(inputs: np.ndarray, old: np.ndarray, new: np.ndarray, w: WeightVector, p: float,
             method: str, state_metric: BaseMetric, size: int, threads: int) -> Optional[float]:
    sub_inputs = inputs[:size]
    first = Ensemble(inputs=sub_inputs, states=old[:size])
    second = Ensemble(inputs=sub_inputs, states=new[:size])
    result = wasserstein_distance(first, second, w, p, method, INPUT_METRIC, state_metric, threads)
    return _accepted_distance(result, "Fixed-point OT step")


def _require_theorem_certificate(certificate: Optional[Certificate]):
    if certificate is None:
        raise CertificationError("certified mode needs a theorem_condition certificate")
    if certificate.kind != "theorem_condition" or not certificate.passed:
        raise CertificationError(
            f"certified mode needs a passed theorem_condition certificate, got "
            f"{certificate.kind} (pass={certificate.passed})")


def converge_fixed_point(model: StateModel, inputs: Ensemble, w: WeightVector, p: float = 1.0,
                         tol: Optional[float] = None, max_steps: Optional[int] = None,
                         method: str = "auto", state_metric: BaseMetric = EUCLIDEAN,
                         start_states: Optional[np.ndarray] = None, left_pad=None,
                         ot_every: Optional[int] = None, ot_subsample: Optional[int] = None,
                         certificate: Optional[Certificate] = None, certified: bool = False,
                         track_to_final: bool = False, threads: Optional[int] = None,
                         chunk: Optional[int] = None) -> FixedPointEstimate:
    """Iterate until the coupled step distance W_p(nu_{n+1}, nu_n) drops below tol

    Step n compares nu_{n+1} with nu_n. Once n reaches the horizon the window
    carries no information from the start any more and every later step is
    exactly zero; stopping there is reported as saturated, not converged.
    """
    tol = settings.converge_tol if tol is None else float(tol)
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    if inputs.horizon != w.horizon:
        raise ShapeMismatchError(f"input horizon {inputs.horizon} != weight horizon {w.horizon}")
    _check_model_inputs(model, inputs)
    if certified:
        _require_theorem_certificate(certificate)
    horizon = inputs.horizon
    max_steps = settings.steps_per_horizon * horizon if max_steps is None else int(max_steps)
    ot_every = settings.ot_every if ot_every is None else int(ot_every)
    size = min(inputs.n_paths, settings.ot_subsample if ot_subsample is None else int(ot_subsample))
    threads, chunk = _resolve(threads, chunk)

    states = initial_states(model, inputs) if start_states is None else np.array(start_states, dtype=float)
    model.check_states(states)
    trace = ConvergenceTrace(steps=[], tol=tol, p=float(p), ot_method=method)
    snapshots = []
    logger.info(f"🚀 Fixed-point iteration: {model.kind}, N={inputs.n_paths}, T={horizon}, "
                f"p={p:g}, tol={tol:g}, max_steps={max_steps}")

    for n in range(max_steps):
        new_states, dists = _advance(model, states, inputs.inputs, left_pad, threads, chunk, w, state_metric)
        coupled = _coupled(dists, p)
        last = coupled < tol or n == max_steps - 1
        ot_value = None
        if ot_every > 0 and (n % ot_every == 0 or last):
            ot_value = _ot_step(inputs.inputs, states, new_states, w, p, method, state_metric, size, threads)
            if ot_value is None:
                trace.ot_rejected += 1
        front = new_states[:, 0, 0]
        trace.steps.append(StepRecord(n=n, wp_step=coupled, wp_step_ot=ot_value,
                                      mean_state=float(np.mean(front)), var_state=float(np.var(front))))
        if track_to_final:
            snapshots.append(new_states[:size].copy())
        states = new_states
        if coupled < tol:
            if n < horizon:
                trace.converged = True
            else:
                trace.saturated = True
            break

    if trace.saturated:
        error_handler.log_warning("Fixed-point iteration", "step distance vanished after the horizon, run is saturated",
                                  {"n": trace.n_final, "T": horizon})
    elif not trace.converged:
        error_handler.log_warning("Fixed-point iteration", f"no convergence within {max_steps} steps",
                                  {"last_step": f"{trace.steps[-1].wp_step:.3e}", "tol": tol})
    else:
        logger.info(f"✅ Converged after {trace.n_final + 1} steps (step distance {trace.steps[-1].wp_step:.3e})")

    if track_to_final and snapshots:
        final = snapshots[-1]
        for i, snap in enumerate(snapshots):
            gap = _coupled(window_dist_batch(snap, final, w, state_metric), p)
            record = trace.steps[i]
            trace.steps[i] = StepRecord(record.n, record.wp_step, record.wp_step_ot,
                                        record.mean_state, record.var_state, wp_to_final=gap)

    try:
        trace.fitted_q, trace.fitted_Q = fit_decay_rate(trace)
    except DomainError as e:
        logger.info(f"ℹ️ Decay rate not fitted: {e}")

    meta = {"seed": inputs.seed, "sampler": inputs.sampler_id, "filter": inputs.filter_id,
            "model": model.kind, "certified": certified}
    return FixedPointEstimate(ensemble=inputs.with_states(states), trace=trace, input_meta=meta)


def fit_decay_rate(trace) -> Tuple[float, float]:
    """Least squares of log wp_step[n] = log Q + n log q over the tail half of the trace

    Accepts a ConvergenceTrace or a plain sequence of step distances indexed from 0.
    """
    if isinstance(trace, ConvergenceTrace):
        n_values = np.array([r.n for r in trace.steps], dtype=float)
        values = np.array([r.wp_step for r in trace.steps], dtype=float)
    else:
        values = np.asarray(trace, dtype=float)
        n_values = np.arange(values.size, dtype=float)
    if values.size == 0:
        raise DomainError("empty trace")
    if np.all(values == 0):
        return 0.0, 0.0
    tail = max(5, math.ceil(values.size / 2))
    n_tail, v_tail = n_values[-tail:], values[-tail:]
    positive = v_tail > 0
    if np.count_nonzero(positive) < 5:
        raise DomainError(f"need at least 5 positive step distances in the fit window, got "
                          f"{np.count_nonzero(positive)}")
    slope, intercept = np.polyfit(n_tail[positive], np.log(v_tail[positive]), 1)
    return float(math.exp(slope)), float(math.exp(intercept))


def envelope_holds(trace: ConvergenceTrace, q: float, Q: float, slack: float = 0.2) -> bool:
    """wp_step[n] <= q^n Q (1 + slack) on the fitted tail"""
    tail = max(5, math.ceil(len(trace.steps) / 2))
    return all(r.wp_step <= (q ** r.n) * Q * (1.0 + slack) for r in trace.steps[-tail:])


def self_consistency_distance(model: StateModel, fp: FixedPointEstimate, w: WeightVector,
                              state_metric: BaseMetric = EUCLIDEAN, left_pad=None) -> float:
    """Coupled W_p moved by one extra Fc on the converged ensemble"""
    ensemble = fp.ensemble
    threads, chunk = _resolve(None, None)
    _, dists = _advance(model, ensemble.states, ensemble.inputs, left_pad, threads, chunk, w, state_metric)
    return _coupled(dists, fp.trace.p)


def _require_lipschitz(certificate: Optional[Certificate], gamma: float):
    if certificate is None or certificate.kind != "lipschitz":
        raise CertificationError("deterministic filter needs a pointwise Lipschitz certificate")
    if not certificate.estimate * gamma < 1.0:
        raise CertificationError(
            f"Lipschitz constant {certificate.estimate:.6g} times gamma {gamma:g} is not below 1")


def _error_factor(certificate: Certificate, gamma: float) -> float:
    """q / (1 - q) with q = L gamma: bounds the distance to the fixed point by this times the last step"""
    q = certificate.estimate * gamma
    return q / (1.0 - q)


def deterministic_filter(model: StateModel, u: PathWindow, w: WeightVector, certificate: Certificate,
                         tol: Optional[float] = None, left_pad=None,
                         state_metric: BaseMetric = EUCLIDEAN, max_steps: Optional[int] = None) -> PathWindow:
    """U_f(u) on the window by iterating x <- F(x, u) from the anchor

    Stops once the a-posteriori bound on the distance to the windowed fixed
    point is below tol.
    """
    _require_lipschitz(certificate, w.gamma)
    factor = _error_factor(certificate, w.gamma)
    tol = settings.converge_tol if tol is None else float(tol)
    if u.horizon != w.horizon:
        raise ShapeMismatchError(f"input horizon {u.horizon} != weight horizon {w.horizon}")
    max_steps = settings.steps_per_horizon * u.horizon if max_steps is None else int(max_steps)
    x = anchor_window(model, u.horizon)
    for _ in range(max_steps):
        nxt = extend_F(model, x, u, left_pad)
        done = factor * state_seq_dist(nxt, x, w, state_metric) < tol
        x = nxt
        if done:
            break
    return x


def deterministic_filter_batch(model: StateModel, inputs: Ensemble, w: WeightVector, certificate: Certificate,
                               tol: Optional[float] = None, left_pad=None,
                               state_metric: BaseMetric = EUCLIDEAN, threads: Optional[int] = None,
                               chunk: Optional[int] = None) -> np.ndarray:
    """deterministic_filter on every path, stopping on the largest per-path bound"""
    _require_lipschitz(certificate, w.gamma)
    factor = _error_factor(certificate, w.gamma)
    tol = settings.converge_tol if tol is None else float(tol)
    threads, chunk = _resolve(threads, chunk)
    states = initial_states(model, inputs)
    for _ in range(settings.steps_per_horizon * inputs.horizon):
        states, dists = _advance(model, states, inputs.inputs, left_pad, threads, chunk, w, state_metric)
        if factor * np.max(dists) < tol:
            break
    return states


def garch_series_filter(model: GarchModel, inputs: np.ndarray) -> np.ndarray:
    """Truncated series h(U)_t = omega + omega sum_k prod_{j<k} (alpha U_{t-j}^2 + beta)

    Evaluated by the backward recursion x_k = omega + c_k x_{k+1} from a zero pad,
    which is the window truncation of the almost surely convergent series.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 3 or inputs.shape[2] != 1:
        raise ShapeMismatchError(f"garch inputs must be shaped (N, T, 1), got {inputs.shape}")
    coeff = model.alpha * inputs[:, :, 0] ** 2 + model.beta
    out = np.empty(inputs.shape)
    carry = np.zeros(inputs.shape[0])
    for k in range(inputs.shape[1] - 1, -1, -1):
        carry = model.omega + coeff[:, k] * carry
        out[:, k, 0] = carry
    return out


@dataclass(frozen=True)
class ConsistencyReport:
    distance: float
    coupled: float
    ot: float
    method: str
    ot_converged: bool = True


def consistency_report(model: StateModel, inputs: Ensemble, w: WeightVector, p: float = 1.0,
                       certificate: Optional[Certificate] = None,
                       series_filter: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                       fixed_point: Optional[FixedPointEstimate] = None, tol: Optional[float] = None,
                       method: str = "auto", state_metric: BaseMetric = EUCLIDEAN,
                       threads: Optional[int] = None) -> ConsistencyReport:
    """Compare the fixed-point ensemble with {(U_f(u_i), u_i)}

    Both ensembles share inputs, so the path-by-path coupling and any full OT
    estimate are upper bounds of W_p; the smaller one is reported. An OT result
    that missed its marginal tolerance is reported but never used.
    """
    if series_filter is None:
        if certificate is None and isinstance(model, GarchModel):
            series_filter = lambda u: garch_series_filter(model, u)  # noqa: E731
        else:
            _require_lipschitz(certificate, w.gamma)
    if fixed_point is None:
        fixed_point = converge_fixed_point(model, inputs, w, p, tol=tol, method=method,
                                           state_metric=state_metric, threads=threads)
    fp_states = fixed_point.ensemble.states
    if series_filter is not None:
        filtered = np.asarray(series_filter(inputs.inputs), dtype=float)
    else:
        filtered = deterministic_filter_batch(model, inputs, w, certificate, tol=tol,
                                              state_metric=state_metric, threads=threads)
    coupled = _coupled(window_dist_batch(fp_states, filtered, w, state_metric), p)
    size = min(inputs.n_paths, settings.assignment_cap)
    first = Ensemble(inputs=inputs.inputs[:size], states=fp_states[:size])
    second = Ensemble(inputs=inputs.inputs[:size], states=filtered[:size])
    result = wasserstein_distance(first, second, w, p, method, INPUT_METRIC, state_metric, threads)
    ot_value = _accepted_distance(result, "Consistency")
    # a subsample bound only speaks for the subsample; keep the full coupling alongside
    usable = ot_value is not None and size == inputs.n_paths
    return ConsistencyReport(distance=min(coupled, ot_value) if usable else coupled, coupled=coupled,
                             ot=result.distance, method=result.method, ot_converged=ot_value is not None)


def consistency_check(model: StateModel, inputs: Ensemble, w: WeightVector, p: float = 1.0,
                      **kwargs) -> float:
    return consistency_report(model, inputs, w, p, **kwargs).distance


@dataclass(frozen=True)
class StationarityReport:
    passed: bool
    max_discrepancy: float
    worst_statistic: str
    statistics: Dict[str, Tuple[float, float]]

    def rows(self):
        for name in sorted(self.statistics):
            discrepancy, tolerance = self.statistics[name]
            yield name, discrepancy, tolerance, discrepancy <= tolerance


def stationarity_check(fp: FixedPointEstimate, max_lag: int = 3, floor: Optional[float] = None) -> StationarityReport:
    """Compare per-time mean, variance and lag autocovariances over interior times k < T/2

    Each statistic's per-time value is compared to its average across those times,
    with tolerance 4 sd / sqrt(N) of the summand plus an absolute floor (the run tol).
    """
    states = fp.ensemble.states
    if states is None:
        raise DomainError("fixed point carries no states")
    n_paths, horizon, dim = states.shape
    interior = max(1, horizon // 2)
    max_lag = max(0, min(int(max_lag), horizon - interior))
    floor = fp.trace.tol if floor is None else float(floor)
    root_n = math.sqrt(n_paths)
    statistics: Dict[str, Tuple[float, float]] = {}

    for c in range(dim):
        x = states[:, :, c]
        means = x.mean(axis=0)
        centred = x - means
        summands = {"mean": x[:, :interior], "var": centred[:, :interior] ** 2}
        for lag in range(1, max_lag + 1):
            summands[f"acov{lag}"] = centred[:, :interior] * centred[:, lag:interior + lag]
        for name, values in summands.items():
            per_time = values.mean(axis=0)
            reference = per_time.mean()
            spread = values.std(axis=0, ddof=1) if n_paths > 1 else np.zeros(interior)
            excess = np.abs(per_time - reference) - (4.0 * spread / root_n + floor)
            worst = int(np.argmax(excess))
            key = f"x{c}.{name}"
            statistics[key] = (float(abs(per_time[worst] - reference)),
                               float(4.0 * spread[worst] / root_n + floor))

    worst_key = max(statistics, key=lambda k: statistics[k][0] - statistics[k][1])
    passed = all(d <= t for d, t in statistics.values())
    max_discrepancy = max(d for d, _ in statistics.values())
    logger.info(f"{'✅' if passed else '❌'} stationarity: max discrepancy {max_discrepancy:.3e} "
                f"(worst {worst_key})")
    return StationarityReport(passed=passed, max_discrepancy=max_discrepancy,
                              worst_statistic=worst_key, statistics=statistics)


@dataclass(frozen=True)
class UniquenessReport:
    distance: float
    coupled: float
    ot: float
    steps: int
    converged: bool
    saturated: bool
    ot_converged: bool = True


def random_start_states(model: StateModel, n_paths: int, horizon: int, seed: int,
                        radius: Optional[float] = None) -> np.ndarray:
    """Random initial windows inside the model's state space"""
    radius = float(settings.certificate_defaults['state_box_radius']) if radius is None else radius
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(2,))))
    draws = rng.uniform(-1.0, 1.0, (n_paths, horizon, model.state_dim))
    if isinstance(model, GarchModel):
        return model.anchor + radius * np.abs(draws)
    if model.kind == "esn":
        return draws
    return model.anchor + radius * draws


def uniqueness_probe(model: StateModel, inputs: Ensemble, w: WeightVector, p: float = 1.0,
                     tol: Optional[float] = None, start_states: Optional[np.ndarray] = None,
                     seed: int = 0, max_steps: Optional[int] = None, method: str = "auto",
                     state_metric: BaseMetric = EUCLIDEAN, threads: Optional[int] = None,
                     chunk: Optional[int] = None) -> UniquenessReport:
    """Two chains, same inputs, different initial windows, advanced in lock step

    Both chains stop when each one's own step distance is below tol; the report
    holds the coupled and the OT distance between their final ensembles.
    """
    tol = settings.converge_tol if tol is None else float(tol)
    threads, chunk = _resolve(threads, chunk)
    horizon = inputs.horizon
    max_steps = settings.steps_per_horizon * horizon if max_steps is None else int(max_steps)
    first = initial_states(model, inputs)
    second = (random_start_states(model, inputs.n_paths, horizon, seed) if start_states is None
              else np.array(start_states, dtype=float))
    model.check_states(second)
    n = 0
    converged = False
    for n in range(max_steps):
        first, d1 = _advance(model, first, inputs.inputs, None, threads, chunk, w, state_metric)
        second, d2 = _advance(model, second, inputs.inputs, None, threads, chunk, w, state_metric)
        if _coupled(d1, p) < tol and _coupled(d2, p) < tol:
            converged = True
            break
    saturated = converged and n >= horizon
    coupled = _coupled(window_dist_batch(first, second, w, state_metric), p)
    size = min(inputs.n_paths, settings.assignment_cap)
    result = wasserstein_distance(Ensemble(inputs=inputs.inputs[:size], states=first[:size]),
                                  Ensemble(inputs=inputs.inputs[:size], states=second[:size]),
                                  w, p, method, INPUT_METRIC, state_metric, threads)
    ot_value = _accepted_distance(result, "Uniqueness")
    usable = ot_value is not None and size == inputs.n_paths
    return UniquenessReport(distance=min(coupled, ot_value) if usable else coupled, coupled=coupled,
                            ot=result.distance, steps=n + 1, converged=converged and not saturated,
                            saturated=saturated, ot_converged=ot_value is not None)


@dataclass(frozen=True)
class ContinuityRow:
    shift: float
    input_distance: float
    output_distance: float

    @property
    def ratio(self) -> float:
        return self.output_distance / self.input_distance if self.input_distance > 0 else math.inf


def continuity_probe(model: StateModel, sampler: HiddenSampler, V: CausalFilter, w: WeightVector,
                     shifts: Sequence[float], n_paths: int, p: float = 1.0, tol: Optional[float] = None,
                     method: str = "auto", threads: Optional[int] = None) -> List[ContinuityRow]:
    """Wasserstein continuity of Xi -> mu^Xi: shift the observed inputs, compare fixed points

    Inputs and their shifted copies share the hidden draw, so distances are
    coupled-path upper bounds refined by OT on the subsample.
    """
    base_inputs = generate_inputs(sampler, V, n_paths, w.horizon, threads)
    base = converge_fixed_point(model, base_inputs, w, p, tol=tol, method=method, threads=threads)
    rows = []
    for shift in shifts:
        shifted = Ensemble(inputs=base_inputs.inputs + shift, hidden=base_inputs.hidden,
                           seed=base_inputs.seed, sampler_id=base_inputs.sampler_id,
                           filter_id=f"{base_inputs.filter_id}+{shift:g}")
        moved = converge_fixed_point(model, shifted, w, p, tol=tol, method=method, threads=threads)
        input_gap = _coupled(window_dist_batch(base_inputs.inputs, shifted.inputs, w, INPUT_METRIC), p)
        output_gap = _coupled(product_dist_batch(base.ensemble.states, base_inputs.inputs,
                                                 moved.ensemble.states, shifted.inputs, w), p)
        rows.append(ContinuityRow(shift=float(shift), input_distance=input_gap, output_distance=output_gap))
    return rows


def ergodic_mean(model: StateModel, sampler: HiddenSampler, n_steps: int, burn_in: int = 1000,
                 V: Optional[CausalFilter] = None, block: int = 100_000) -> float:
    """Long-run average of the first state component along a single path"""
    if n_steps < 1:
        raise DomainError(f"n_steps must be >= 1, got {n_steps}")
    V = V or CausalFilter.identity(sampler.dim)
    if not V.memoryless:
        raise DomainError("ergodic_mean draws inputs block by block and needs a memoryless filter")
    scalar = model.state_dim == 1 and model.input_dim == 1
    x = float(model.anchor[0]) if scalar else model.anchor.copy()
    total = 0.0
    done = 0
    block_index = 0
    while done < burn_in + n_steps:
        draws = V.apply_array(sampler.draw_path(block_index, block)[None])[0]
        block_index += 1
        if scalar:
            for u in draws[:, 0].tolist():
                x = model.map(x, u)
                if done >= burn_in:
                    total += x
                done += 1
                if done >= burn_in + n_steps:
                    break
        else:
            for u in draws:
                x = model.map(x, u)
                if done >= burn_in:
                    total += float(x[0])
                done += 1
                if done >= burn_in + n_steps:
                    break
    return float(total) / n_steps
