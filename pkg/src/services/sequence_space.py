#!/usr/bin/env python3
"""
Sequence Space Service - stochesp
Weighted sequence-space geometry on truncated windows.

Key responsibilities:
- Geometric weighting sequences w_t = (gamma-1) gamma^t and their tail mass
- Path windows: finite windows of semi-infinite sequences, values[k] at time -(k+1)
- The weighted l1 state distance, the capped input distance and their sum
- Batched versions of the distances for ensembles (arrays shaped (..., T, dim))

External dependencies:
- numpy for all array arithmetic
- core.error_handler for domain / shape errors
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from core.error_handler import DomainError, ShapeMismatchError


@dataclass(frozen=True, eq=False)
class WeightVector:
    gamma: float
    horizon: int
    weights: np.ndarray = field(repr=False)
    tail_mass: float

    @property
    def growth_constant(self) -> float:
        """|w| of the geometric family, which is gamma itself"""
        return self.gamma


def make_weights(gamma: float, horizon: int) -> WeightVector:
    """Truncated geometric weights; weights[0] is w_{-1}, the largest"""
    if not gamma > 1.0 or not math.isfinite(gamma):
        raise DomainError(f"gamma must be a finite real > 1, got {gamma}")
    if int(horizon) != horizon or horizon < 1:
        raise DomainError(f"horizon must be a positive integer, got {horizon}")
    horizon = int(horizon)
    k = np.arange(horizon, dtype=float)
    weights = (gamma - 1.0) * gamma ** (-(k + 1.0))
    weights.setflags(write=False)
    return WeightVector(gamma=float(gamma), horizon=horizon, weights=weights,
                        tail_mass=float(gamma ** (-horizon)))


def default_horizon(gamma: float, tail_tol: float = 1e-6) -> int:
    """Smallest T with gamma^{-T} < tail_tol"""
    if not gamma > 1.0:
        raise DomainError(f"gamma must be > 1, got {gamma}")
    if not 0.0 < tail_tol < 1.0:
        raise DomainError(f"tail_tol must lie in (0, 1), got {tail_tol}")
    horizon = int(math.floor(math.log(1.0 / tail_tol) / math.log(gamma))) + 1
    while gamma ** (-horizon) >= tail_tol:
        horizon += 1
    while horizon > 1 and gamma ** (-(horizon - 1)) < tail_tol:
        horizon -= 1
    return horizon


@dataclass(frozen=True)
class BaseMetric:
    """Metric on R^dim: euclidean or ||D(x - y)||_2, optionally capped at `cap`"""
    kind: str = "euclidean"
    scale: Optional[tuple] = None
    cap: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "diag_scaled"):
            raise DomainError(f"unknown base metric '{self.kind}'")
        if self.kind == "diag_scaled":
            if self.scale is None or len(self.scale) == 0:
                raise DomainError("diag_scaled metric needs a diagonal scale vector")
            if any(s == 0 for s in self.scale):
                raise DomainError("diag_scaled metric needs a nonsingular diagonal")
        if self.cap is not None and not self.cap > 0:
            raise DomainError(f"metric cap must be positive, got {self.cap}")

    @classmethod
    def euclidean(cls) -> "BaseMetric":
        return cls("euclidean")

    @classmethod
    def diag_scaled(cls, diagonal) -> "BaseMetric":
        return cls("diag_scaled", scale=tuple(float(d) for d in np.ravel(diagonal)))

    @classmethod
    def capped_euclidean(cls, cap: float = 1.0) -> "BaseMetric":
        return cls("euclidean", cap=float(cap))

    def pointwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Distances along the last axis"""
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.kind == "diag_scaled":
            scale = np.asarray(self.scale, dtype=float)
            if scale.shape[0] != diff.shape[-1]:
                raise ShapeMismatchError(
                    f"metric scale has {scale.shape[0]} entries, points have dim {diff.shape[-1]}")
            diff = diff * scale
        if diff.shape[-1] == 1:
            dist = np.abs(diff[..., 0])
        else:
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
        if self.cap is not None:
            dist = np.minimum(dist, self.cap)
        return dist


EUCLIDEAN = BaseMetric.euclidean()
INPUT_METRIC = BaseMetric.capped_euclidean(1.0)


@dataclass(frozen=True, eq=False)
class PathWindow:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeMismatchError(f"window values must be shaped (T, dim), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("window entries must be finite")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at_time(self, t: int) -> np.ndarray:
        """Entry at nonpositive time t <= -1"""
        if t > -1 or -t > self.horizon:
            raise DomainError(f"time {t} outside window [-{self.horizon}, -1]")
        return self.values[-t - 1]

    @classmethod
    def constant(cls, point, horizon: int) -> "PathWindow":
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(np.tile(point, (horizon, 1)))


@dataclass(frozen=True, eq=False)
class PathPair:
    state: PathWindow
    input: PathWindow

    def __post_init__(self):
        if self.state.horizon != self.input.horizon:
            raise ShapeMismatchError(
                f"state horizon {self.state.horizon} != input horizon {self.input.horizon}")

    @property
    def horizon(self) -> int:
        return self.state.horizon


def _check_window_shapes(a: np.ndarray, b: np.ndarray, w: WeightVector):
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeMismatchError(f"window shapes differ: {a.shape[-2:]} vs {b.shape[-2:]}")
    if a.shape[-2] != w.horizon:
        raise ShapeMismatchError(f"window horizon {a.shape[-2]} != weight horizon {w.horizon}")


def window_dist_batch(a: np.ndarray, b: np.ndarray, w: WeightVector,
                      base_metric: BaseMetric = EUCLIDEAN) -> np.ndarray:
    """Weighted l1 distance of arrays shaped (..., T, dim); broadcasting allowed"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_window_shapes(a, b, w)
    pointwise = base_metric.pointwise(a, b)
    return np.sum(pointwise * w.weights, axis=-1)


def state_seq_dist(a: PathWindow, b: PathWindow, w: WeightVector,
                   base_metric: BaseMetric = EUCLIDEAN) -> float:
    """d_X(a, b) = sum_k weights[k] d(a[k], b[k]) on the window"""
    if a.dim != b.dim:
        raise ShapeMismatchError(f"window dims differ: {a.dim} vs {b.dim}")
    return float(window_dist_batch(a.values, b.values, w, base_metric))


def input_window_dist(a: PathWindow, b: PathWindow, w: WeightVector,
                      input_metric: BaseMetric = INPUT_METRIC) -> float:
    if a.dim != b.dim:
        raise ShapeMismatchError(f"input window dims differ: {a.dim} vs {b.dim}")
    return float(window_dist_batch(a.values, b.values, w, input_metric))


def product_dist(p1: PathPair, p2: PathPair, w: WeightVector,
                 input_metric: BaseMetric = INPUT_METRIC,
                 state_metric: BaseMetric = EUCLIDEAN) -> float:
    """Sum metric on states x inputs"""
    return (state_seq_dist(p1.state, p2.state, w, state_metric)
            + input_window_dist(p1.input, p2.input, w, input_metric))


def product_dist_batch(states_a: np.ndarray, inputs_a: np.ndarray,
                       states_b: np.ndarray, inputs_b: np.ndarray, w: WeightVector,
                       input_metric: BaseMetric = INPUT_METRIC,
                       state_metric: BaseMetric = EUCLIDEAN) -> np.ndarray:
    state_part = window_dist_batch(states_a, states_b, w, state_metric)
    if inputs_a is inputs_b:
        return state_part
    return state_part + window_dist_batch(inputs_a, inputs_b, w, input_metric)


def shifted_weighted_sum(alpha, w: WeightVector, n: int) -> float:
    """Truncated sum_t w_t alpha_{t-n}: entries shifted n steps into the past"""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (w.horizon,):
        raise ShapeMismatchError(f"alpha must have shape ({w.horizon},), got {alpha.shape}")
    if np.any(alpha < 0):
        raise DomainError("alpha must be nonnegative")
    if not 0 <= n < w.horizon:
        raise DomainError(f"shift n must lie in [0, {w.horizon}), got {n}")
    return float(np.sum(w.weights[:w.horizon - n] * alpha[n:]))
