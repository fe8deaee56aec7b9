#!/usr/bin/env python3
"""
Certificate Service - stochesp
Verifiable sufficient conditions for a unique stochastic solution.

Key responsibilities:
- kappa-contractive marginals: GARCH (analytic / Monte Carlo), sampled state pairs
  for memoryless iid inputs, state-affine and stochastic difference equation bounds
- C-bounded inputs: truncated weighted sum of anchored one-step displacements
- The theorem gate kappa < 2^(1-p) / gamma
- ESN scaled-norm bounds and the two-dimensional counterexample matrix
- The integrability counterexample for f(x, u) = alpha x

External dependencies:
- numpy for linear algebra and Monte Carlo reductions
- scipy.stats.qmc (Latin hypercube state pairs)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.stats import qmc

from core.error_handler import (CertificationError, DomainError, ErrorHandler, ShapeMismatchError,
                                UnsupportedFilterError)
from core.settings import settings
from core.utilities import ParallelUtilities
from services.input_service import CausalFilter, Ensemble, HiddenSampler
from services.sequence_space import EUCLIDEAN, BaseMetric, PathWindow, WeightVector
from services.state_models import (AffineModel, EsnModel, EulerSdeModel, GarchModel, LinearTestModel,
                                   StateModel, extend_F)

logger = logging.getLogger(__name__)
error_handler = ErrorHandler(__name__)

CERTIFICATE_KINDS = ("contractivity", "boundedness", "theorem_condition", "esn_spectral",
                     "counterexample", "lipschitz")


@dataclass(frozen=True)
class Certificate:
    kind: str
    estimate: float
    passed: bool
    method: str = "analytic"
    n_samples: int = 0
    stderr: float = 0.0
    notes: str = ""
    details: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CERTIFICATE_KINDS:
            raise DomainError(f"unknown certificate kind '{self.kind}'")
        if self.method not in ("analytic", "monte_carlo"):
            raise DomainError(f"unknown certificate method '{self.method}'")

    def summary_items(self, prefix: str) -> Dict[str, Any]:
        items = {
            f"{prefix}.kind": self.kind,
            f"{prefix}.estimate": self.estimate,
            f"{prefix}.pass": self.passed,
            f"{prefix}.method": self.method,
        }
        if self.method == "monte_carlo":
            items[f"{prefix}.n_samples"] = self.n_samples
            items[f"{prefix}.stderr"] = self.stderr
        if self.notes:
            items[f"{prefix}.notes"] = self.notes
        for key, value in self.details.items():
            items[f"{prefix}.{key}"] = value
        return items


def _defaults(key: str) -> Any:
    return settings.certificate_defaults[key]


def _mc_certificate(kind: str, values: np.ndarray, notes: str = "", **details) -> Certificate:
    estimate = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return Certificate(kind=kind, estimate=estimate, passed=estimate + 2.0 * stderr < 1.0,
                       method="monte_carlo", n_samples=int(values.size), stderr=stderr,
                       notes=notes, details=dict(details))


def garch_kappa(alpha: float, beta: float, p: float, innovation: HiddenSampler,
                n_samples: Optional[int] = None, monte_carlo: bool = False) -> Certificate:
    """kappa = E[(alpha eta^2 + beta)^p]; exact from the innovation moments for integer p"""
    if alpha < 0 or beta < 0:
        raise DomainError(f"garch needs alpha, beta >= 0, got ({alpha}, {beta})")
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    if innovation.dim != 1:
        raise ShapeMismatchError("garch innovations are scalar")
    if not innovation.has_moment(2 * p):
        return Certificate(kind="contractivity", estimate=math.inf, passed=False,
                           notes=f"innovation {innovation.identifier} lacks a finite {2 * p:g}-th moment")
    if float(p).is_integer() and not monte_carlo:
        p_int = int(p)
        kappa = sum(math.comb(p_int, j) * alpha ** j * beta ** (p_int - j) * innovation.moment(2 * j)
                    for j in range(p_int + 1))
        return Certificate(kind="contractivity", estimate=float(kappa), passed=kappa < 1.0,
                           notes="E[(alpha eta^2 + beta)^p] from innovation moments")
    n_samples = int(n_samples or _defaults('n_samples'))
    eta = innovation.draw_path(0, n_samples)[:, 0]
    return _mc_certificate("contractivity", (alpha * eta * eta + beta) ** p,
                           notes="Monte Carlo E[(alpha eta^2 + beta)^p]")


def _state_box(model: StateModel, radius: float):
    anchor = model.anchor
    if isinstance(model, GarchModel):
        return np.zeros(1), np.full(1, radius)
    if isinstance(model, EsnModel):
        return -np.ones(model.state_dim), np.ones(model.state_dim)
    return anchor - radius, anchor + radius


def _state_pairs(model: StateModel, n_pairs: int, n_near: int, radius: float,
                 near_radius: float, seed: int):
    low, high = _state_box(model, radius)
    dim = model.state_dim
    sampler = qmc.LatinHypercube(d=2 * dim, seed=seed)
    points = qmc.scale(sampler.random(n_pairs), np.tile(low, 2), np.tile(high, 2))
    first, second = points[:, :dim], points[:, dim:]

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1,))))
    directions = rng.standard_normal((n_near, dim))
    directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-300)
    anchor = model.anchor
    if isinstance(model, GarchModel):
        near_first = np.tile(anchor, (n_near, 1))
        near_second = anchor + near_radius * np.abs(directions)
    else:
        near_first = anchor + near_radius * directions
        near_second = anchor - near_radius * directions
    return np.vstack([first, near_first]), np.vstack([second, near_second])


def _observed_inputs(sampler: HiddenSampler, V: CausalFilter, n_samples: int) -> np.ndarray:
    draws = sampler.draw_path(0, n_samples)
    return V.apply_array(draws[None])[0]


def _require_iid_filter(V: CausalFilter):
    if not (V.memoryless and V.time_invariant):
        raise UnsupportedFilterError(
            f"filter {V.identifier} is not memoryless and time invariant; "
            "conditional contractivity is not certified for it")


def contractivity_estimate(model: StateModel, sampler: HiddenSampler, V: CausalFilter, p: float = 1.0,
                           n_state_pairs: Optional[int] = None, n_samples: Optional[int] = None,
                           state_metric: BaseMetric = EUCLIDEAN, seed: Optional[int] = None,
                           threads: Optional[int] = None) -> Certificate:
    """kappa-hat = max over sampled pairs of E[d(f(x1,U), f(x2,U))^p] / d(x1,x2)^p

    The sup runs over finitely many pairs, so the estimate is one-sided: it can
    only under-state the true constant.
    """
    _require_iid_filter(V)
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    if V.input_dim != sampler.dim or V.output_dim != model.input_dim:
        raise ShapeMismatchError(
            f"sampler dim {sampler.dim} -> filter {V.input_dim}->{V.output_dim} -> model input {model.input_dim}")
    n_state_pairs = int(n_state_pairs or _defaults('n_state_pairs'))
    n_samples = int(n_samples or _defaults('n_samples'))
    seed = sampler.seed if seed is None else seed
    threads = settings.threads if threads is None else max(1, int(threads))

    inputs = _observed_inputs(sampler, V, n_samples)
    first, second = _state_pairs(model, n_state_pairs, int(_defaults('near_anchor_pairs')),
                                 float(_defaults('state_box_radius')),
                                 float(_defaults('near_anchor_radius')), seed)

    def evaluate(start: int, stop: int):
        out = []
        for x1, x2 in zip(first[start:stop], second[start:stop]):
            base = float(state_metric.pointwise(x1, x2))
            if base == 0.0:
                continue
            moved = state_metric.pointwise(model.map(x1[None, :], inputs), model.map(x2[None, :], inputs))
            ratios = (moved / base) ** p
            out.append((float(np.mean(ratios)), float(np.std(ratios, ddof=1) / math.sqrt(ratios.size))))
        return out

    results = [r for chunk in ParallelUtilities.map_chunks(evaluate, len(first), 16, threads) for r in chunk]
    if not results:
        raise DomainError("every sampled state pair had zero distance")
    kappa, stderr = max(results, key=lambda r: r[0])
    passed = kappa + 2.0 * stderr < 1.0
    logger.info(f"{'✅' if passed else '⚠️'} contractivity {model.kind}: kappa-hat={kappa:.6g} "
                f"(stderr {stderr:.2g}, {len(results)} pairs, {n_samples} input draws)")
    return Certificate(kind="contractivity", estimate=kappa, passed=passed, method="monte_carlo",
                       n_samples=n_samples, stderr=stderr,
                       notes="lower-confidence: sup over sampled state pairs only",
                       details={"n_state_pairs": len(results)})


def bounded_input_C(model: StateModel, inputs: Ensemble, w: WeightVector, p: float = 1.0,
                    state_metric: BaseMetric = EUCLIDEAN) -> Certificate:
    """C-hat = sum_k w_k E[d(f(x_*, U_k), x_*)^p] over the window"""
    if inputs.horizon != w.horizon:
        raise ShapeMismatchError(f"input horizon {inputs.horizon} != weight horizon {w.horizon}")
    if inputs.input_dim != model.input_dim:
        raise ShapeMismatchError(f"inputs have dim {inputs.input_dim}, model expects {model.input_dim}")
    anchor = model.anchor
    displacement = state_metric.pointwise(model.map(anchor, inputs.inputs), anchor) ** p
    per_time = displacement.mean(axis=0)
    variance = displacement.var(axis=0, ddof=1) if inputs.n_paths > 1 else np.zeros(w.horizon)
    estimate = float(np.sum(w.weights * per_time))
    stderr = float(math.sqrt(np.sum(w.weights ** 2 * variance) / inputs.n_paths))
    return Certificate(kind="boundedness", estimate=estimate, passed=math.isfinite(estimate),
                       method="monte_carlo", n_samples=inputs.n_paths, stderr=stderr,
                       notes=f"window sum; the tail beyond the horizon carries weight {w.tail_mass:.3g}")


def check_theorem_condition(kappa: float, gamma: float, p: float) -> Certificate:
    """Pass iff kappa < 2^(1-p) / gamma"""
    if kappa < 0 or not math.isfinite(kappa):
        raise DomainError(f"kappa must be a finite nonnegative real, got {kappa}")
    if not gamma > 1:
        raise DomainError(f"gamma must be > 1, got {gamma}")
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    threshold = 2.0 ** (1.0 - p) / gamma
    return Certificate(kind="theorem_condition", estimate=float(kappa), passed=kappa < threshold,
                       notes="kappa < 2^(1-p)/gamma",
                       details={"threshold": threshold, "deterministic_condition": kappa * gamma < 1.0})


def _diagonal(D) -> np.ndarray:
    d = np.asarray(D, dtype=float)
    if d.ndim == 2:
        if np.any(d - np.diag(np.diag(d))):
            raise DomainError("D must be diagonal")
        d = np.diag(d)
    if d.ndim != 1:
        raise ShapeMismatchError(f"D must be a diagonal vector or matrix, got shape {d.shape}")
    if np.any(d == 0):
        raise DomainError("D must be nonsingular")
    return d


def esn_scaled_norm(A, D, rtol: float = 1e-10, max_iter: int = 100_000) -> float:
    """||D A D^-1||_2 by power iteration on S^T S"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = _diagonal(D)
    if A.shape != (d.size, d.size):
        raise ShapeMismatchError(f"A {A.shape} does not match D of size {d.size}")
    S = (d[:, None] * A) / d[None, :]
    gram = S.T @ S
    rng = np.random.Generator(np.random.Philox(0))
    v = rng.standard_normal(d.size)
    v /= np.linalg.norm(v)
    lam = float(v @ gram @ v)
    for _ in range(max_iter):
        gv = gram @ v
        norm = np.linalg.norm(gv)
        if norm == 0.0:
            return 0.0
        v = gv / norm
        new_lam = float(v @ gram @ v)
        if abs(new_lam - lam) <= rtol * max(abs(new_lam), 1e-300):
            lam = new_lam
            break
        lam = new_lam
    else:
        error_handler.log_warning("Power iteration", f"hit {max_iter} iterations", {"rtol": rtol})
    return math.sqrt(max(lam, 0.0))


@dataclass(frozen=True)
class CounterexampleNorm:
    A: np.ndarray
    inf_norm: float
    d_opt: float


def esn_counterexample_matrix(c: float) -> np.ndarray:
    if not c > 0:
        raise DomainError(f"c must be positive, got {c}")
    return np.array([[0.0, c ** -0.5], [-c ** 1.5, c + 1.0]])


def esn_counterexample_norm_at(c: float, d: float) -> float:
    """Closed-form ||diag(d,1) A diag(d,1)^-1||_2 for the counterexample matrix"""
    if not c > 0 or d == 0:
        raise DomainError(f"need c > 0 and d != 0, got ({c}, {d})")
    trace = c ** 3 / d ** 2 + d ** 2 / c + (c + 1.0) ** 2
    lam = trace / 2.0 + math.sqrt(trace ** 2 - 4.0 * c ** 2) / 2.0
    return math.sqrt(lam)


def esn_counterexample_norm(c: float) -> CounterexampleNorm:
    """Infimum over diagonal D of the scaled norm, attained at d = c"""
    A = esn_counterexample_matrix(c)
    return CounterexampleNorm(A=A, inf_norm=esn_counterexample_norm_at(c, c), d_opt=float(c))


def tanh_outside_lipschitz(r: float) -> float:
    """Lipschitz constant of tanh on {|x| >= r}: the derivative at the boundary"""
    if r < 0:
        raise DomainError(f"radius must be >= 0, got {r}")
    return 1.0 - math.tanh(r) ** 2


def esn_radius_factor(r: float) -> float:
    """L_r = sqrt((L_r'^2 + 2) / 3)"""
    return math.sqrt((tanh_outside_lipschitz(r) ** 2 + 2.0) / 3.0)


def esn_epsilon_bound(L_r: float, delta: float, p: float = 1.0) -> float:
    """epsilon = (1 - (1 - L_r^p) delta)^(-1/p) - 1"""
    errors = []
    if not 0 < L_r < 1:
        errors.append(f"L_r must lie in (0, 1), got {L_r}")
    if not 0 < delta <= 1:
        errors.append(f"delta must lie in (0, 1], got {delta}")
    if p < 1:
        errors.append(f"p must be >= 1, got {p}")
    if errors:
        raise DomainError("; ".join(errors))
    return (1.0 - (1.0 - L_r ** p) * delta) ** (-1.0 / p) - 1.0


@dataclass(frozen=True)
class DivergenceReport:
    alpha: float
    gamma: float
    p: float
    zero_residual: float
    power_residual: float
    edge_residual: float
    partial_sums: List[float]
    threshold: float
    certificate: Certificate

    def table(self):
        ratio = self.gamma * self.alpha ** self.p
        return [(T, (self.gamma - 1.0) * ratio ** (-T), s) for T, s in enumerate(self.partial_sums, start=1)]


def appendix_d_counterexample(alpha: float, gamma: float, p: float, horizon: int = 24,
                              threshold: float = 1e6) -> DivergenceReport:
    """Two exact fixed points of F for f(x,u) = alpha x, one outside the integrable class

    x = 0 and x_t = alpha^t both solve x_t = alpha x_{t-1}; the weighted p-th moment
    of the second, sum_t w_t alpha^{tp}, diverges when gamma alpha^p < 1.
    """
    errors = []
    if not p > 1:
        errors.append(f"p must be > 1, got {p}")
    if not 0 < alpha < 0.5:
        errors.append(f"alpha must lie in (0, 1/2), got {alpha}")
    if not gamma > 1:
        errors.append(f"gamma must be > 1, got {gamma}")
    if not gamma * alpha > 1:
        errors.append(f"gamma * alpha = {gamma * alpha:.6g} must exceed 1")
    if not gamma * alpha ** p < 2.0 ** (1.0 - p):
        errors.append(f"gamma * alpha^p = {gamma * alpha ** p:.6g} must stay below 2^(1-p) = {2.0 ** (1.0 - p):.6g}")
    if horizon < 2:
        errors.append(f"horizon must be >= 2, got {horizon}")
    if errors:
        raise DomainError("counterexample parameters rejected: " + "; ".join(errors))

    model = LinearTestModel(a=alpha)
    zero_input = PathWindow(np.zeros(horizon))
    zero = PathWindow(np.zeros(horizon))
    k = np.arange(horizon)
    power = PathWindow(alpha ** (-(k + 1.0)))
    zero_image = extend_F(model, zero, zero_input)
    power_image = extend_F(model, power, zero_input, left_pad=[alpha ** (-(horizon + 1.0))])
    relative = np.abs(power_image.values - power.values)[:, 0] / power.values[:, 0]
    zero_residual = float(np.max(np.abs(zero_image.values)))
    power_residual = float(np.max(relative[:-1]))
    edge_residual = float(relative[-1])

    ratio = gamma * alpha ** p
    terms = (gamma - 1.0) * ratio ** (-(k + 1.0))
    partial_sums = np.cumsum(terms).tolist()
    monotone = bool(np.all(np.diff(partial_sums) > 0))
    exact = zero_residual == 0.0 and power_residual < 1e-12
    diverges = partial_sums[-1] > threshold
    certificate = Certificate(
        kind="counterexample", estimate=float(partial_sums[-1]), passed=exact and monotone and diverges,
        notes=f"weighted p-th moment partial sums of x_t = alpha^t up to T={horizon}",
        details={"first_T_over_threshold": next((i + 1 for i, s in enumerate(partial_sums) if s > threshold), 0)})
    return DivergenceReport(alpha=alpha, gamma=gamma, p=p, zero_residual=zero_residual,
                            power_residual=power_residual, edge_residual=edge_residual,
                            partial_sums=partial_sums, threshold=threshold, certificate=certificate)


def _scaling(state_metric: BaseMetric, dim: int) -> np.ndarray:
    if state_metric.kind == "diag_scaled":
        return _diagonal(state_metric.scale)
    return np.ones(dim)


def pointwise_lipschitz(model: StateModel, state_metric: BaseMetric = EUCLIDEAN) -> Certificate:
    """Uniform Lipschitz constant of f in x; the certificate deterministic filters require"""
    if isinstance(model, LinearTestModel):
        c = abs(model.a)
    elif isinstance(model, EsnModel):
        c = esn_scaled_norm(model.A, _scaling(state_metric, model.state_dim))
    elif isinstance(model, AffineModel):
        if len(model.a_coeffs) > 1 and any(np.any(coeff) for coeff in model.a_coeffs[1:]):
            raise CertificationError("A(u) depends on u; no uniform Lipschitz bound in x")
        c = esn_scaled_norm(model.a_coeffs[0], _scaling(state_metric, model.state_dim))
    elif isinstance(model, GarchModel):
        if model.alpha != 0:
            raise CertificationError("garch with alpha > 0 has no uniform Lipschitz bound in x")
        c = model.beta
    elif isinstance(model, EulerSdeModel):
        if model.lipschitz_beta != 0:
            raise CertificationError("euler_sde with state-dependent diffusion has no uniform bound in x")
        slopes = np.diff(model.alpha_values) / np.diff(model.alpha_knots)
        base = 1.0 if model.euler_form == "drifted" else 0.0
        c = float(np.max(np.abs(base + model.h * slopes)))
    else:
        raise CertificationError(f"no analytic Lipschitz bound for model kind '{model.kind}'")
    return Certificate(kind="lipschitz", estimate=float(c), passed=c < 1.0,
                       notes=f"sup_u Lip(f(., u)) under the {state_metric.kind} metric")


def affine_kappa(model: AffineModel, sampler: HiddenSampler, V: CausalFilter, p: float = 1.0,
                 n_samples: Optional[int] = None, state_metric: BaseMetric = EUCLIDEAN) -> Certificate:
    """E ||D A(U) D^-1||_op^p; the matching bound on b(U) is bounded_input_C at x_* = 0"""
    _require_iid_filter(V)
    n_samples = int(n_samples or _defaults('n_samples'))
    d = _scaling(state_metric, model.state_dim)
    matrices = model.matrix(_observed_inputs(sampler, V, n_samples))
    scaled = (d[:, None] * matrices) / d[None, :]
    norms = np.linalg.norm(scaled, ord=2, axis=(-2, -1))
    return _mc_certificate("contractivity", norms ** p, notes="Monte Carlo E||A(U)||^p")


def sde_parameters(model: EulerSdeModel):
    """(L, eta): common Lipschitz constant and the negative upper bound of alpha'"""
    L = max(model.lipschitz_alpha, model.lipschitz_beta)
    slopes = np.diff(model.alpha_values) / np.diff(model.alpha_knots)
    return L, max(0.0, -float(np.max(slopes)))


def sde_kappa(L: float, eta: float, h: float, delta: float) -> Certificate:
    """kappa = 1 - eta h + L delta for the drifted stochastic difference equation (p = 1)"""
    violations = []
    if not h > 0:
        violations.append(f"h must be positive, got {h}")
    if not h * L < 1:
        violations.append(f"h L = {h * L:.6g} must be < 1")
    if not 0 <= eta < L:
        violations.append(f"eta = {eta:.6g} must lie in [0, L = {L:.6g})")
    if L > 0 and not delta < eta * h / L:
        violations.append(f"delta = {delta:.6g} must be < eta h / L = {eta * h / L:.6g}")
    kappa = 1.0 - eta * h + L * delta
    return Certificate(kind="contractivity", estimate=float(kappa), passed=not violations and kappa < 1.0,
                       notes="; ".join(violations) if violations else "1 - eta h + L delta")
