#!/usr/bin/env python3
"""
Wasserstein Service - stochesp
Empirical Wasserstein-p distances between equal-size ensembles under the
sequence-space product metric.

Key responsibilities:
- Exact 1-D fast path (sorted / comonotone coupling)
- Exact assignment solver for N <= assignment_cap
- Entropic (Sinkhorn) approximation with reg annealing and warm-started potentials,
  dense through POT, blocked log-domain with implicit cost rows above dense_max
- Brute-force N! oracle for tiny ensembles
- Method selection for callers that do not care which solver runs

External dependencies:
- scipy.optimize.linear_sum_assignment (shortest augmenting path)
- POT (ot.bregman.sinkhorn_log)
- scipy.special.logsumexp for the blocked log-domain iterations
"""

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from core.error_handler import DomainError, ErrorHandler, ShapeMismatchError, SolverLimitError
from core.settings import settings
from core.utilities import ParallelUtilities
from services.input_service import Ensemble
from services.sequence_space import EUCLIDEAN, INPUT_METRIC, BaseMetric, WeightVector, window_dist_batch

error_handler = ErrorHandler(__name__)

OT_METHODS = ("quantile_1d", "assignment", "sinkhorn")
BRUTE_FORCE_MAX = 6
# upper bound on floats materialised per cost block: rows * N * T * dim
_BLOCK_BUDGET = 4_000_000


@dataclass(frozen=True)
class OTResult:
    distance: float
    p: float
    method: str
    plan_cost: float
    iterations: int = 0
    marginal_err: float = 0.0
    converged: bool = True
    reg: Optional[float] = None


def _check_p(p: float):
    if not p >= 1 or not math.isfinite(p):
        raise DomainError(f"p must be a finite real >= 1, got {p}")


def _result(method: str, plan_cost: float, p: float, **extra) -> OTResult:
    plan_cost = max(float(plan_cost), 0.0)
    return OTResult(distance=plan_cost ** (1.0 / p), p=float(p), method=method, plan_cost=plan_cost, **extra)


def wp_quantile_1d(a, b, p: float = 1.0) -> OTResult:
    """Comonotone coupling of two equal-size samples on the line"""
    _check_p(p)
    a = np.sort(np.ravel(np.asarray(a, dtype=float)))
    b = np.sort(np.ravel(np.asarray(b, dtype=float)))
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise DomainError("empty samples")
    return _result("quantile_1d", np.mean(np.abs(a - b) ** p), p)


def _check_pair(A: Ensemble, B: Ensemble, w: WeightVector):
    if A.n_paths != B.n_paths:
        raise ShapeMismatchError(f"ensemble sizes differ: {A.n_paths} vs {B.n_paths}")
    if A.inputs.shape[1:] != B.inputs.shape[1:]:
        raise ShapeMismatchError(f"input shapes differ: {A.inputs.shape} vs {B.inputs.shape}")
    if (A.states is None) != (B.states is None):
        raise ShapeMismatchError("one ensemble carries states, the other does not")
    if A.states is not None and A.states.shape[1:] != B.states.shape[1:]:
        raise ShapeMismatchError(f"state shapes differ: {A.states.shape} vs {B.states.shape}")
    if A.horizon != w.horizon:
        raise ShapeMismatchError(f"ensemble horizon {A.horizon} != weight horizon {w.horizon}")


def _cost_rows(A: Ensemble, B: Ensemble, w: WeightVector, p: float, start: int, stop: int,
               input_metric: BaseMetric, state_metric: BaseMetric) -> np.ndarray:
    """Rows start:stop of c_ij = d((x_i,u_i),(x_j,u_j))^p"""
    dist = window_dist_batch(A.inputs[start:stop, None], B.inputs[None], w, input_metric)
    if A.states is not None:
        dist = dist + window_dist_batch(A.states[start:stop, None], B.states[None], w, state_metric)
    return dist if p == 1 else dist ** p


def _rows_per_block(A: Ensemble, block: Optional[int]) -> int:
    width = A.inputs.shape[2] + (0 if A.states is None else A.states.shape[2])
    block = settings.cost_block if block is None else int(block)
    return max(1, min(block, _BLOCK_BUDGET // max(1, A.n_paths * A.horizon * width)))


def cost_matrix(A: Ensemble, B: Ensemble, w: WeightVector, p: float = 1.0,
                input_metric: BaseMetric = INPUT_METRIC, state_metric: BaseMetric = EUCLIDEAN,
                threads: Optional[int] = None, block: Optional[int] = None) -> np.ndarray:
    """N x N cost matrix built in fixed row blocks"""
    _check_p(p)
    _check_pair(A, B, w)
    threads = settings.threads if threads is None else max(1, int(threads))
    blocks = ParallelUtilities.map_chunks(
        lambda start, stop: _cost_rows(A, B, w, p, start, stop, input_metric, state_metric),
        A.n_paths, _rows_per_block(A, block), threads)
    return np.concatenate(blocks, axis=0)


def _assignment_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(np.sum(cost[rows, cols])) / cost.shape[0]


def wp_assignment(A: Ensemble, B: Ensemble, w: WeightVector, p: float = 1.0,
                  input_metric: BaseMetric = INPUT_METRIC, state_metric: BaseMetric = EUCLIDEAN,
                  threads: Optional[int] = None) -> OTResult:
    _check_p(p)
    _check_pair(A, B, w)
    if A.n_paths > settings.assignment_cap:
        raise SolverLimitError(
            f"assignment solver capped at {settings.assignment_cap} paths, got {A.n_paths}")
    cost = cost_matrix(A, B, w, p, input_metric, state_metric, threads)
    return _result("assignment", _assignment_cost(cost), p)


def wp_brute_force(A: Ensemble, B: Ensemble, w: WeightVector, p: float = 1.0,
                   input_metric: BaseMetric = INPUT_METRIC,
                   state_metric: BaseMetric = EUCLIDEAN) -> OTResult:
    """Exhaustive minimum over all N! pairings"""
    _check_p(p)
    _check_pair(A, B, w)
    if A.n_paths > BRUTE_FORCE_MAX:
        raise SolverLimitError(f"brute force limited to N <= {BRUTE_FORCE_MAX}, got {A.n_paths}")
    cost = cost_matrix(A, B, w, p, input_metric, state_metric, threads=1)
    rows = np.arange(A.n_paths)
    best = min(float(np.sum(cost[rows, list(perm)])) for perm in itertools.permutations(range(A.n_paths)))
    return _result("assignment", best / A.n_paths, p)


def _anneal_schedule(reg: float, stages: int):
    return [reg * 2.0 ** k for k in range(stages, -1, -1)]


def _marginal_error(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(np.abs(plan.sum(axis=1) - a)) + np.sum(np.abs(plan.sum(axis=0) - b)))


def _sinkhorn_dense(cost: np.ndarray, reg: float, stages: int, max_iter: int,
                    tol: float) -> Tuple[float, int, float]:
    n = cost.shape[0]
    a = np.full(n, 1.0 / n)
    b = np.full(n, 1.0 / n)
    # dual potentials in cost units, carried from one stage to the next
    f = np.zeros(n)
    g = np.zeros(n)
    total_iter = 0
    plan = None
    schedule = _anneal_schedule(reg, stages)
    for stage, stage_reg in enumerate(schedule):
        final = stage == len(schedule) - 1
        # rows are exact after each update, and the l1 column error is at most sqrt(n) times POT's l2 one
        stop = tol / math.sqrt(n) * (1.0 if final else stage_reg / reg)
        plan, log = ot.bregman.sinkhorn_log(
            a, b, cost, stage_reg, numItermax=max_iter if final else max(10, max_iter // 4),
            stopThr=stop, warmstart=(f / stage_reg, g / stage_reg), log=True, warn=False)
        f = stage_reg * log['log_u']
        g = stage_reg * log['log_v']
        total_iter += int(log['niter']) + 1
    return float(np.sum(plan * cost)), total_iter, _marginal_error(plan, a, b)


class _LazyCost:
    """Implicit cost rows and columns, recomputed block by block"""

    def __init__(self, A, B, w, p, input_metric, state_metric, threads):
        self.A, self.B, self.w, self.p = A, B, w, p
        self.metrics = (input_metric, state_metric)
        self.threads = threads
        self.rows = _rows_per_block(A, None)

    def map_rows(self, func, transpose: bool = False):
        first, second = (self.B, self.A) if transpose else (self.A, self.B)

        def run(start, stop):
            block = _cost_rows(first, second, self.w, self.p, start, stop, *self.metrics)
            return func(start, stop, block)

        return ParallelUtilities.map_chunks(run, first.n_paths, self.rows, self.threads)


def _sinkhorn_lazy(lazy: _LazyCost, n: int, reg: float, stages: int, max_iter: int,
                   tol: float) -> Tuple[float, int, float]:
    log_w = -math.log(n)
    f = np.zeros(n)
    g = np.zeros(n)
    total_iter = 0
    err = math.inf
    for stage_reg in _anneal_schedule(reg, stages):
        for it in range(max_iter):
            g = np.concatenate(lazy.map_rows(
                lambda s, e, c: -stage_reg * logsumexp((f[None, :] - c) / stage_reg + log_w, axis=1),
                transpose=True))
            f = np.concatenate(lazy.map_rows(
                lambda s, e, c: -stage_reg * logsumexp((g[None, :] - c) / stage_reg + log_w, axis=1)))
            total_iter += 1
            if it % 10 == 9 or it == max_iter - 1:
                # rows are exact after the f update; the column sums carry the error
                col_sums = np.sum(lazy.map_rows(
                    lambda s, e, c: np.exp((f[s:e, None] + g[None, :] - c) / stage_reg + 2 * log_w).sum(axis=0)),
                    axis=0)
                err = float(np.sum(np.abs(col_sums - 1.0 / n)))
                if err < tol:
                    break
    plan_cost = float(np.sum(lazy.map_rows(
        lambda s, e, c: np.sum(np.exp((f[s:e, None] + g[None, :] - c) / reg + 2 * log_w) * c))))
    return plan_cost, total_iter, err


def _unconverged(p: float, iterations: int, err: float, reg: float) -> OTResult:
    return OTResult(distance=math.nan, p=float(p), method="sinkhorn", plan_cost=math.nan,
                    iterations=iterations, marginal_err=err, converged=False, reg=reg)


def wp_sinkhorn(A: Ensemble, B: Ensemble, w: WeightVector, p: float = 1.0,
                reg: Optional[float] = None, max_iter: Optional[int] = None, tol: Optional[float] = None,
                input_metric: BaseMetric = INPUT_METRIC, state_metric: BaseMetric = EUCLIDEAN,
                threads: Optional[int] = None) -> OTResult:
    """Entropic OT; reg defaults to reg_scale x median cost

    A plan whose marginal error stays at or above tol is never turned into a
    distance. Up to assignment_cap the exact solver answers instead; above it
    the result carries converged=False and a NaN distance. Nothing is raised.
    The entropic bias is not corrected.
    """
    _check_p(p)
    _check_pair(A, B, w)
    config = settings.sinkhorn
    max_iter = int(config['max_iter'] if max_iter is None else max_iter)
    tol = float(config['tol'] if tol is None else tol)
    stages = int(config['anneal_stages'])
    threads = settings.threads if threads is None else max(1, int(threads))
    n = A.n_paths
    dense = n <= int(config['dense_max'])

    if dense:
        cost = cost_matrix(A, B, w, p, input_metric, state_metric, threads)
        if reg is None:
            reg = float(config['reg_scale']) * float(np.median(cost))
    elif reg is None:
        head = min(n, 256)
        sample = _cost_rows(A.subset(np.arange(head)), B.subset(np.arange(head)), w, p, 0, head,
                            input_metric, state_metric)
        reg = float(config['reg_scale']) * float(np.median(sample))
    if not reg > 0:
        # every cost entry is zero (identical point masses)
        if dense and not np.any(cost):
            return _result("sinkhorn", 0.0, p, reg=0.0)
        raise DomainError(f"sinkhorn regularisation must be positive, got {reg}")

    if dense:
        plan_cost, iterations, err = _sinkhorn_dense(cost, reg, stages, max_iter, tol)
    else:
        lazy = _LazyCost(A, B, w, p, input_metric, state_metric, threads)
        plan_cost, iterations, err = _sinkhorn_lazy(lazy, n, reg, stages, max_iter, tol)

    if err < tol:
        return _result("sinkhorn", plan_cost, p, iterations=iterations, marginal_err=err,
                       converged=True, reg=reg)

    context = {'n_paths': n, 'reg': f"{reg:.3e}", 'iterations': iterations, 'marginal_err': f"{err:.3e}"}
    if n <= settings.assignment_cap:
        error_handler.log_warning("Sinkhorn", f"marginal error above {tol:.1e}, using exact assignment", context)
        if dense:
            return _result("assignment", _assignment_cost(cost), p)
        return wp_assignment(A, B, w, p, input_metric, state_metric, threads)
    error_handler.log_warning("Sinkhorn", f"marginal error above {tol:.1e}, no distance reported", context)
    return _unconverged(p, iterations, err, reg)


def _quantile_eligible(A: Ensemble, B: Ensemble) -> bool:
    if A.states is None or A.horizon != 1 or A.states.shape[2] != 1:
        return False
    common = A.inputs[0]
    return bool(np.all(A.inputs == common) and np.all(B.inputs == common))


def select_method(A: Ensemble, B: Ensemble, method: str = "auto") -> str:
    if method in OT_METHODS:
        return method
    if method == "quantile":
        return "quantile_1d"
    if method != "auto":
        raise DomainError(f"unknown OT method '{method}', expected auto or one of {OT_METHODS}")
    if _quantile_eligible(A, B):
        return "quantile_1d"
    if A.n_paths <= settings.assignment_auto_max:
        return "assignment"
    return "sinkhorn"


def wasserstein_distance(A: Ensemble, B: Ensemble, w: WeightVector, p: float = 1.0,
                         method: str = "auto", input_metric: BaseMetric = INPUT_METRIC,
                         state_metric: BaseMetric = EUCLIDEAN, threads: Optional[int] = None) -> OTResult:
    """W_p between two ensembles with the requested (or automatically chosen) solver"""
    _check_pair(A, B, w)
    chosen = select_method(A, B, method)
    if chosen == "quantile_1d":
        if not _quantile_eligible(A, B):
            raise DomainError("quantile_1d needs scalar horizon-1 states and one common input value")
        # with a common input only the weighted state term varies
        scale = w.weights[0] * state_metric.pointwise(np.ones(1), np.zeros(1))
        return wp_quantile_1d(A.states[:, 0, 0] * scale, B.states[:, 0, 0] * scale, p)
    if chosen == "assignment":
        return wp_assignment(A, B, w, p, input_metric, state_metric, threads)
    return wp_sinkhorn(A, B, w, p, input_metric=input_metric, state_metric=state_metric, threads=threads)
