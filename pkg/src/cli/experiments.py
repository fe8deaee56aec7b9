#!/usr/bin/env python3
"""
Experiment runners - stochesp
Binds the services into the named experiments and writes their artifacts.

Key responsibilities:
- Registry of experiments with required config sections and one-line descriptions
- Per-seed execution with full seed provenance
- trace.csv / trace_seed<S>.csv, summary.txt and fixedpoint.csv, all written atomically

External dependencies:
- services.* for every computation
- core.utilities for CSV / summary rendering and atomic writes
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cli.config_schema import (REQUIRED_SECTIONS, CertifySpec, EsnGapSpec, ExperimentConfig, LoadedConfig,
                               build_filter, build_metric, build_sampler, build_state_model, build_weights)
from core.error_handler import (CertificationError, ConfigError, DomainError, ErrorHandler, SolverLimitError,
                                UnsupportedFilterError, with_error_handling)
from core.settings import settings
from core.utilities import CsvUtilities, FileUtilities, SummaryUtilities
from services.certificate_service import (Certificate, affine_kappa, appendix_d_counterexample, bounded_input_C,
                                          check_theorem_condition, contractivity_estimate, esn_counterexample_norm,
                                          esn_counterexample_norm_at, esn_scaled_norm, garch_kappa,
                                          pointwise_lipschitz)
from services.dynamics_service import (TRACE_HEADER, FixedPointEstimate, consistency_report, converge_fixed_point,
                                       envelope_holds, ergodic_mean, garch_series_filter, self_consistency_distance,
                                       stationarity_check, uniqueness_probe)
from services.input_service import CausalFilter, Ensemble, HiddenSampler, generate_inputs, save_ensemble_csv
from services.sequence_space import BaseMetric
from services.state_models import AffineModel, EsnModel, GarchModel, StateModel
from services.wasserstein_service import wasserstein_distance

logger = logging.getLogger('stochesp')
error_handler = ErrorHandler('stochesp')

TOLERANCE_NOTE = "Monte Carlo tolerances are engineering choices, not derived error bounds"


@dataclass
class SeedResult:
    seed: int
    passed: bool
    summary: Dict[str, Any]
    trace_header: Sequence[str]
    trace_rows: List[Sequence[Any]]
    ensemble: Optional[Ensemble] = None
    tables: Dict[str, Tuple[Sequence[str], List[Sequence[Any]]]] = field(default_factory=dict)


@dataclass
class RunContext:
    loaded: LoadedConfig
    config: ExperimentConfig
    threads: int

    @property
    def out_dir(self) -> Path:
        return Path(self.config.run.output_dir)


@dataclass(frozen=True)
class Experiment:
    name: str
    description: str
    runner: Callable[[RunContext, int], SeedResult]

    @property
    def required(self) -> Tuple[str, ...]:
        return ("experiment",) + REQUIRED_SECTIONS[self.name]


# ---- shared helpers ----

@dataclass
class _Setup:
    model: StateModel
    sampler: HiddenSampler
    V: CausalFilter
    metric: BaseMetric


def _setup(config: ExperimentConfig, seed: int, model: Optional[StateModel] = None) -> _Setup:
    try:
        sampler = build_sampler(config.inputs.sampler, seed)
        return _Setup(model=model or build_state_model(config.model), sampler=sampler,
                      V=build_filter(config.inputs.filter, sampler.dim),
                      metric=build_metric(config.run.state_metric))
    except DomainError as e:
        error_handler.log_warning("Experiment setup", str(e), {"experiment": config.experiment, "seed": seed})
        raise ConfigError("config describes an invalid system", [str(e)]) from e


def _kappa_certificate(s: _Setup, p: float, spec, threads: int) -> Optional[Certificate]:
    """Best available kappa certificate, None when the input law cannot be certified"""
    n_samples = spec.n_samples if spec else None
    if isinstance(s.model, GarchModel) and s.V.kind == "identity":
        return garch_kappa(s.model.alpha, s.model.beta, p, s.sampler, n_samples,
                           monte_carlo=bool(spec and spec.monte_carlo))
    try:
        if isinstance(s.model, AffineModel):
            return affine_kappa(s.model, s.sampler, s.V, p, n_samples, s.metric)
        return contractivity_estimate(s.model, s.sampler, s.V, p, spec.n_state_pairs if spec else None,
                                      n_samples, s.metric, threads=threads)
    except UnsupportedFilterError as e:
        error_handler.log_warning("contractivity", f"not certified: {e}",
                                  {"model": s.model.kind, "filter": s.V.identifier})
        return None


def _relative_ok(value: float, reference: float, rel_tol: float) -> bool:
    return abs(value - reference) <= rel_tol * abs(reference)


def _model_summary(model: StateModel) -> Dict[str, Any]:
    return {f"model.{key}": value for key, value in model.describe().items()}


def _trace_summary(fp: FixedPointEstimate, summary: Dict[str, Any]):
    trace = fp.trace
    last = trace.steps[-1]
    summary.update({
        "converged": trace.converged,
        "saturated": trace.saturated,
        "n_final": trace.n_final,
        "final_step": last.wp_step,
        "mean_state_t-1": last.mean_state,
        "var_state_t-1": last.var_state,
        "ot_method": trace.ot_method,
        "ot_rejected": trace.ot_rejected,
    })
    if trace.fitted_q is not None:
        summary["fitted_q"] = trace.fitted_q
        summary["fitted_Q"] = trace.fitted_Q


def _fixed_point_checks(ctx: RunContext, s: _Setup, inputs: Ensemble, fp: FixedPointEstimate, w,
                        seed: int, summary: Dict[str, Any], force_stationarity: bool = False):
    """Configured diagnostics on a converged ensemble; returns (all passed, stationarity table)"""
    checks = ctx.config.checks
    run = ctx.config.run
    trace = fp.trace
    outcomes: Dict[str, bool] = {}
    table = None
    fp_mean = trace.steps[-1].mean_state

    if checks.expected_mean is not None:
        outcomes["mean"] = _relative_ok(fp_mean, checks.expected_mean, checks.mean_rel_tol)
        summary["check.mean.expected"] = checks.expected_mean
    if checks.ergodic_steps:
        ergodic = ergodic_mean(s.model, s.sampler, checks.ergodic_steps, V=s.V)
        reference = checks.expected_mean if checks.expected_mean is not None else fp_mean
        outcomes["ergodic"] = _relative_ok(ergodic, reference, checks.mean_rel_tol)
        summary["check.ergodic.mean"] = ergodic
    if trace.fitted_q is not None:
        envelope = envelope_holds(trace, trace.fitted_q, trace.fitted_Q, checks.envelope_slack)
        summary["check.envelope.pass"] = envelope
        if checks.fit_q_max is not None:
            outcomes["envelope"] = envelope
    if checks.fit_q_max is not None:
        outcomes["fit_q"] = trace.fitted_q is not None and trace.fitted_q <= checks.fit_q_max
        summary["check.fit_q.max"] = checks.fit_q_max
    if checks.self_consistency:
        moved = self_consistency_distance(s.model, fp, w, s.metric)
        outcomes["self_consistency"] = moved < 2.0 * trace.tol
        summary["check.self_consistency.distance"] = moved
    if checks.uniqueness:
        report = uniqueness_probe(s.model, inputs, w, run.p, tol=trace.tol, seed=seed, method=run.ot,
                                 state_metric=s.metric, threads=ctx.threads)
        outcomes["uniqueness"] = report.converged and report.distance < checks.uniqueness_factor * trace.tol
        summary.update({"check.uniqueness.distance": report.distance, "check.uniqueness.coupled": report.coupled,
                        "check.uniqueness.ot": report.ot, "check.uniqueness.ot_converged": report.ot_converged,
                        "check.uniqueness.steps": report.steps})
    if checks.stationarity or force_stationarity:
        report = stationarity_check(fp, checks.max_lag)
        outcomes["stationarity"] = report.passed
        summary.update({"check.stationarity.max_discrepancy": report.max_discrepancy,
                        "check.stationarity.worst": report.worst_statistic})
        table = (("statistic", "discrepancy", "tolerance", "pass"), list(report.rows()))

    for name, ok in outcomes.items():
        summary[f"check.{name}.pass"] = ok
    return all(outcomes.values()), table


def _converge_seed(ctx: RunContext, seed: int, force_stationarity: bool = False,
                   s: Optional[_Setup] = None) -> Tuple[SeedResult, FixedPointEstimate]:
    config = ctx.config
    run = config.run
    s = s or _setup(config, seed)
    w = build_weights(config.weights)
    inputs = generate_inputs(s.sampler, s.V, run.n_paths, w.horizon, ctx.threads)
    summary: Dict[str, Any] = {"horizon": w.horizon, "gamma": w.gamma, "n_paths": run.n_paths, "p": run.p}
    summary.update(_model_summary(s.model))

    theorem = None
    if run.certified:
        kappa = _kappa_certificate(s, run.p, config.certify, ctx.threads)
        if kappa is None:
            raise CertificationError("certified run requested but the input law is not certified")
        theorem = check_theorem_condition(kappa.estimate, w.gamma, run.p)
        summary.update(kappa.summary_items("certificate.contractivity"))
        summary.update(theorem.summary_items("certificate.theorem"))

    fp = converge_fixed_point(s.model, inputs, w, run.p, tol=run.tol, max_steps=run.max_steps, method=run.ot,
                              state_metric=s.metric, certificate=theorem, certified=run.certified,
                              threads=ctx.threads)
    _trace_summary(fp, summary)
    checks_ok, table = _fixed_point_checks(ctx, s, inputs, fp, w, seed, summary, force_stationarity)
    passed = fp.trace.converged and checks_ok
    tables = {"stationarity": table} if table else {}
    result = SeedResult(seed=seed, passed=passed, summary=summary, trace_header=TRACE_HEADER,
                        trace_rows=list(fp.trace.rows()), ensemble=fp.ensemble, tables=tables)
    return result, fp


# ---- runners ----

def run_converge(ctx: RunContext, seed: int) -> SeedResult:
    return _converge_seed(ctx, seed)[0]


def run_stationarity(ctx: RunContext, seed: int) -> SeedResult:
    return _converge_seed(ctx, seed, force_stationarity=True)[0]


CERTIFY_HEADER = ("certificate", "kind", "estimate", "pass", "method", "n_samples", "stderr")


def run_certify(ctx: RunContext, seed: int) -> SeedResult:
    config = ctx.config
    spec = config.certify or CertifySpec()
    run = config.run
    s = _setup(config, seed)
    w = build_weights(config.weights)
    certificates: Dict[str, Certificate] = {}
    summary: Dict[str, Any] = {"horizon": w.horizon, "gamma": w.gamma, "p": run.p}

    if spec.garch_kappa and isinstance(s.model, GarchModel):
        certificates["garch_kappa"] = garch_kappa(s.model.alpha, s.model.beta, run.p, s.sampler,
                                                  spec.n_samples, monte_carlo=spec.monte_carlo)
    if spec.contractivity:
        try:
            certificates["contractivity"] = contractivity_estimate(
                s.model, s.sampler, s.V, run.p, spec.n_state_pairs, spec.n_samples, s.metric, threads=ctx.threads)
        except UnsupportedFilterError as e:
            summary["certificate.contractivity.status"] = "not certified"
            error_handler.log_warning("contractivity", f"not certified: {e}", {"filter": s.V.identifier})
    if spec.bounded_input:
        inputs = generate_inputs(s.sampler, s.V, run.n_paths, w.horizon, ctx.threads)
        certificates["bounded_input"] = bounded_input_C(s.model, inputs, w, run.p, s.metric)
    if spec.lipschitz:
        try:
            certificates["lipschitz"] = pointwise_lipschitz(s.model, s.metric)
        except CertificationError as e:
            summary["certificate.lipschitz.status"] = "not certified"
            error_handler.log_warning("lipschitz", f"not certified: {e}", {"model": s.model.kind})
    if spec.theorem:
        kappa = certificates.get("garch_kappa") or certificates.get("contractivity")
        if kappa is not None and np.isfinite(kappa.estimate):
            certificates["theorem"] = check_theorem_condition(kappa.estimate, w.gamma, run.p)
        else:
            summary["certificate.theorem.status"] = "not certified"

    rows = []
    for name, cert in certificates.items():
        summary.update(cert.summary_items(f"certificate.{name}"))
        rows.append((name, cert.kind, cert.estimate, cert.passed, cert.method, cert.n_samples, cert.stderr))
    not_certified = any(key.endswith(".status") for key in summary)
    passed = bool(certificates) and all(c.passed for c in certificates.values()) and not not_certified
    return SeedResult(seed=seed, passed=passed, summary=summary, trace_header=CERTIFY_HEADER, trace_rows=rows)


@with_error_handling("consistency noise floor", default_return=None)
def _noise_floor(ctx: RunContext, s: _Setup, w, fp: FixedPointEstimate, seed: int) -> Optional[float]:
    """W_p between the fixed point and one built from independent draws (seed + 1)"""
    config = ctx.config
    run = config.run
    other = generate_inputs(build_sampler(config.inputs.sampler, seed + 1), s.V, run.n_paths, w.horizon,
                            ctx.threads)
    other_fp = converge_fixed_point(s.model, other, w, run.p, tol=run.tol, max_steps=run.max_steps,
                                    method=run.ot, state_metric=s.metric, threads=ctx.threads)
    head = np.arange(min(run.n_paths, settings.assignment_auto_max))
    result = wasserstein_distance(fp.ensemble.subset(head), other_fp.ensemble.subset(head), w, run.p, run.ot,
                                  state_metric=s.metric, threads=ctx.threads)
    if not result.converged:
        raise SolverLimitError(f"{result.method} stopped with marginal error {result.marginal_err:.3e}")
    return result.distance


def run_consistency(ctx: RunContext, seed: int) -> SeedResult:
    config = ctx.config
    run = config.run
    s = _setup(config, seed)
    w = build_weights(config.weights)
    inputs = generate_inputs(s.sampler, s.V, run.n_paths, w.horizon, ctx.threads)
    certificate = None
    series = None
    if isinstance(s.model, GarchModel):
        series = lambda u: garch_series_filter(s.model, u)  # noqa: E731
    else:
        certificate = pointwise_lipschitz(s.model, s.metric)

    fp = converge_fixed_point(s.model, inputs, w, run.p, tol=run.tol, max_steps=run.max_steps, method=run.ot,
                              state_metric=s.metric, threads=ctx.threads)
    report = consistency_report(s.model, inputs, w, run.p, certificate=certificate, series_filter=series,
                                fixed_point=fp, tol=run.tol, method=run.ot, state_metric=s.metric,
                                threads=ctx.threads)
    threshold = config.checks.max_distance or 5.0 * fp.trace.tol
    summary: Dict[str, Any] = {"horizon": w.horizon, "gamma": w.gamma, "n_paths": run.n_paths, "p": run.p,
                               "consistency.distance": report.distance, "consistency.coupled": report.coupled,
                               "consistency.ot": report.ot, "consistency.method": report.method,
                               "consistency.ot_converged": report.ot_converged,
                               "consistency.threshold": threshold}
    summary.update(_model_summary(s.model))
    if certificate is not None:
        summary.update(certificate.summary_items("certificate.lipschitz"))
    _trace_summary(fp, summary)

    if isinstance(s.model, GarchModel):
        floor = _noise_floor(ctx, s, w, fp, seed)
        if floor is not None:
            summary["consistency.noise_floor"] = floor
            threshold = max(threshold, floor)

    passed = fp.trace.converged and report.distance < threshold
    summary["consistency.pass"] = passed
    return SeedResult(seed=seed, passed=passed, summary=summary, trace_header=TRACE_HEADER,
                      trace_rows=list(fp.trace.rows()), ensemble=fp.ensemble)


def run_counterexample_d(ctx: RunContext, seed: int) -> SeedResult:
    spec = ctx.config.counterexample
    report = appendix_d_counterexample(spec.alpha, spec.gamma, spec.p, spec.horizon, spec.threshold)
    summary: Dict[str, Any] = {
        "alpha": spec.alpha, "gamma": spec.gamma, "p": spec.p,
        "gamma_alpha": spec.gamma * spec.alpha,
        "gamma_alpha_p": spec.gamma * spec.alpha ** spec.p,
        "zero_residual": report.zero_residual,
        "power_residual": report.power_residual,
        "edge_residual": report.edge_residual,
        "partial_sum_final": report.partial_sums[-1],
    }
    summary.update(report.certificate.summary_items("certificate.counterexample"))
    return SeedResult(seed=seed, passed=report.certificate.passed, summary=summary,
                      trace_header=("T", "term", "partial_sum"), trace_rows=report.table())


def run_esn_gap(ctx: RunContext, seed: int) -> SeedResult:
    config = ctx.config
    spec = config.esn_gap or EsnGapSpec()
    c = spec.c
    gap = esn_counterexample_norm(c)
    numeric = esn_scaled_norm(gap.A, [c, 1.0])
    grid = np.linspace(c / 4.0, 4.0 * c, spec.d_grid)
    grid_norms = np.array([esn_counterexample_norm_at(c, d) for d in grid])
    d_best = float(grid[int(np.argmin(grid_norms))])
    grid_step = float(grid[1] - grid[0])

    C = np.eye(2) if spec.C is None else np.asarray(spec.C, dtype=float)
    b = np.zeros(2) if spec.b is None else np.asarray(spec.b, dtype=float)
    model = EsnModel(A=gap.A, C=C, b=b)
    s = _setup(config, seed, model=model)
    s.metric = BaseMetric.diag_scaled([c, 1.0])
    kappa = contractivity_estimate(model, s.sampler, s.V, config.run.p,
                                   config.certify.n_state_pairs if config.certify else None,
                                   config.certify.n_samples if config.certify else None,
                                   s.metric, threads=ctx.threads)
    result, _ = _converge_seed(ctx, seed, s=s)
    theorem = check_theorem_condition(kappa.estimate, result.summary["gamma"], config.run.p)

    summary = result.summary
    summary.update({"c": c, "inf_norm": gap.inf_norm, "numeric_norm": numeric,
                    "closed_form_gap": abs(numeric - gap.inf_norm),
                    "grid_argmin_d": d_best, "grid_step": grid_step,
                    "deterministic_esp_obstructed": gap.inf_norm > 1.0})
    summary.update(kappa.summary_items("certificate.contractivity"))
    summary.update(theorem.summary_items("certificate.theorem"))
    result.passed = (result.passed and gap.inf_norm > 1.0 and kappa.passed
                     and abs(d_best - c) <= grid_step)
    return result


EXPERIMENTS: Dict[str, Experiment] = {
    e.name: e for e in (
        Experiment("converge", "Wasserstein fixed-point iteration of Fc with geometric rate fit", run_converge),
        Experiment("certify", "contractivity, bounded-input and theorem-condition certificates", run_certify),
        Experiment("consistency", "fixed point versus the deterministic filter on shared inputs", run_consistency),
        Experiment("counterexample_d", "two fixed points of f(x,u) = alpha x and the diverging moment sums",
                   run_counterexample_d),
        Experiment("esn_gap", "ESN with no deterministic echo states but a unique stochastic solution",
                   run_esn_gap),
        Experiment("stationarity", "stationary inputs give a stationary fixed point", run_stationarity),
    )
}


def list_experiments() -> str:
    lines = []
    for name in sorted(EXPERIMENTS):
        experiment = EXPERIMENTS[name]
        lines.append(f"{name:<17} requires: {', '.join(experiment.required):<34} {experiment.description}")
    return "\n".join(lines) + "\n"


# ---- artifact writing ----

def _seeded_name(stem: str, seed: int, first: bool) -> str:
    return f"{stem}.csv" if first else f"{stem}_seed{seed}.csv"


def write_artifacts(ctx: RunContext, results: List[SeedResult], summary: Dict[str, Any]) -> Path:
    out_dir = ctx.out_dir
    FileUtilities.ensure_directory_exists(out_dir)
    for index, result in enumerate(results):
        first = index == 0
        CsvUtilities.write(out_dir / _seeded_name("trace", result.seed, first), result.trace_header,
                           result.trace_rows)
        for stem, (header, rows) in result.tables.items():
            CsvUtilities.write(out_dir / _seeded_name(stem, result.seed, first), header, rows)
    if results and results[0].ensemble is not None and ctx.config.run.dump_paths > 0:
        save_ensemble_csv(results[0].ensemble, out_dir / "fixedpoint.csv", ctx.config.run.dump_paths)
    FileUtilities.write_text_atomic(out_dir / "summary.txt", SummaryUtilities.render(summary))
    error_handler.log_info("Artifacts", f"{len(results)} seed(s) written", {"dir": str(out_dir)})
    return out_dir


def run_experiment(loaded: LoadedConfig, config: ExperimentConfig) -> Tuple[bool, Dict[str, Any], List[SeedResult]]:
    """Run every seed, write artifacts, return (passed, summary, per-seed results)"""
    threads = config.run.threads or settings.threads
    ctx = RunContext(loaded=loaded, config=config, threads=threads)
    experiment = EXPERIMENTS[config.experiment]
    logger.info(f"🚀 Experiment {experiment.name}: seeds {config.seeds}, threads {threads}, ot {config.run.ot}")

    results = [experiment.runner(ctx, seed) for seed in config.seeds]
    passed = all(r.passed for r in results)
    summary: Dict[str, Any] = {
        "experiment": experiment.name,
        "config_path": str(loaded.path),
        "config_hash": loaded.config_hash,
        "seeds": list(config.seeds),
        "library": settings.library_name,
        "library_version": settings.library_version,
        "threads": threads,
        "ot": config.run.ot,
        "tolerance_note": TOLERANCE_NOTE,
        "pass": passed,
    }
    multi = len(results) > 1
    for r in results:
        prefix = f"seed{r.seed}." if multi else ""
        summary.update({f"{prefix}{key}": value for key, value in r.summary.items()})
        if multi:
            summary[f"{prefix}pass"] = r.passed

    write_artifacts(ctx, results, summary)
    logger.info(f"{'✅' if passed else '❌'} Experiment {experiment.name} "
                f"{'passed' if passed else 'failed its checks'}; artifacts in {ctx.out_dir}")
    return passed, summary, results
