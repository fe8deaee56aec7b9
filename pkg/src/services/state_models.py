#!/usr/bin/env python3
"""
State Models - stochesp
The state-map zoo f: X x U -> X and its sequence-space extensions F and Fc.

Key responsibilities:
- Immutable model records: garch, affine, esn, euler_sde, linear_test
- Vectorised one-step maps over any leading (path) axes
- extend_F / apply_fc on single windows and on whole ensembles

Windows follow the sequence-space convention: values[k] holds time -(k+1), so
F(x, u)[k] = f(x[k+1], u[k]) and the oldest entry uses the left pad.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from core.error_handler import DomainError, ShapeMismatchError
from services.sequence_space import PathPair, PathWindow

logger = logging.getLogger(__name__)

MODEL_KINDS = ("garch", "affine", "esn", "euler_sde", "linear_test")


class StateModel(ABC):
    """f: X x U -> X with dims and the anchor point x_*"""

    kind: str = ""

    @property
    @abstractmethod
    def state_dim(self) -> int:
        ...

    @property
    @abstractmethod
    def input_dim(self) -> int:
        ...

    @property
    def anchor(self) -> np.ndarray:
        return np.zeros(self.state_dim)

    @abstractmethod
    def map(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """f applied along the last axis; leading axes broadcast"""

    def check_states(self, x: np.ndarray) -> None:
        """Raise if x lies outside the state space"""

    def describe(self) -> dict:
        return {"kind": self.kind, "state_dim": self.state_dim, "input_dim": self.input_dim}


@dataclass(frozen=True, eq=False)
class GarchModel(StateModel):
    omega: float
    alpha: float
    beta: float
    kind: str = field(default="garch", init=False)

    def __post_init__(self):
        if min(self.omega, self.alpha, self.beta) < 0:
            raise DomainError(
                f"garch needs omega, alpha, beta >= 0, got ({self.omega}, {self.alpha}, {self.beta})")

    @property
    def state_dim(self) -> int:
        return 1

    @property
    def input_dim(self) -> int:
        return 1

    def map(self, x, u):
        return self.omega + (self.alpha * u * u + self.beta) * x

    def check_states(self, x):
        if np.any(np.asarray(x) < 0):
            raise DomainError("garch states must be nonnegative")

    @property
    def stationary_mean(self) -> Optional[float]:
        """omega / (1 - alpha - beta) for unit-variance innovations, if finite"""
        persistence = self.alpha + self.beta
        return self.omega / (1.0 - persistence) if persistence < 1 else None

    def describe(self):
        return {**super().describe(), "omega": self.omega, "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True, eq=False)
class LinearTestModel(StateModel):
    a: float
    kind: str = field(default="linear_test", init=False)

    @property
    def state_dim(self) -> int:
        return 1

    @property
    def input_dim(self) -> int:
        return 1

    def map(self, x, u):
        return self.a * x + u

    def describe(self):
        return {**super().describe(), "a": self.a}


def _as_tensor(value, shape_tail: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape[-len(shape_tail):] != shape_tail:
        raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected trailing {shape_tail}")
    return arr


@dataclass(frozen=True, eq=False)
class AffineModel(StateModel):
    """f(x, u) = A(u) x + b(u) with A, b tensor polynomials of degree <= 2 in u

    a_coeffs = (A0[n,n], A1[m,n,n], A2[m,m,n,n]) and b_coeffs = (b0[n], b1[m,n], b2[m,m,n]),
    any trailing coefficient may be omitted.
    """
    a_coeffs: Tuple[np.ndarray, ...]
    b_coeffs: Tuple[np.ndarray, ...]
    n_inputs: int
    kind: str = field(default="affine", init=False)

    def __post_init__(self):
        if not 1 <= len(self.a_coeffs) <= 3 or not 1 <= len(self.b_coeffs) <= 3:
            raise DomainError("affine coefficients support polynomial degree 0..2")
        n = np.asarray(self.a_coeffs[0]).shape[0]
        m = self.n_inputs
        a_shapes = [(n, n), (m, n, n), (m, m, n, n)]
        b_shapes = [(n,), (m, n), (m, m, n)]
        a = tuple(_as_tensor(c, s, f"A{i}") for i, (c, s) in enumerate(zip(self.a_coeffs, a_shapes)))
        b = tuple(_as_tensor(c, s, f"b{i}") for i, (c, s) in enumerate(zip(self.b_coeffs, b_shapes)))
        for i, (c, s) in enumerate(zip(a, a_shapes)):
            if c.shape != s:
                raise ShapeMismatchError(f"A{i} has shape {c.shape}, expected {s}")
        for i, (c, s) in enumerate(zip(b, b_shapes)):
            if c.shape != s:
                raise ShapeMismatchError(f"b{i} has shape {c.shape}, expected {s}")
        object.__setattr__(self, 'a_coeffs', a)
        object.__setattr__(self, 'b_coeffs', b)

    @property
    def state_dim(self) -> int:
        return self.a_coeffs[0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.n_inputs

    def matrix(self, u: np.ndarray) -> np.ndarray:
        """A(u), shaped (..., n, n)"""
        u = np.asarray(u, dtype=float)
        out = np.broadcast_to(self.a_coeffs[0], u.shape[:-1] + self.a_coeffs[0].shape).copy()
        if len(self.a_coeffs) > 1:
            out += np.einsum('...i,inm->...nm', u, self.a_coeffs[1])
        if len(self.a_coeffs) > 2:
            out += np.einsum('...i,...j,ijnm->...nm', u, u, self.a_coeffs[2])
        return out

    def offset(self, u: np.ndarray) -> np.ndarray:
        """b(u), shaped (..., n)"""
        u = np.asarray(u, dtype=float)
        out = np.broadcast_to(self.b_coeffs[0], u.shape[:-1] + self.b_coeffs[0].shape).copy()
        if len(self.b_coeffs) > 1:
            out += np.einsum('...i,in->...n', u, self.b_coeffs[1])
        if len(self.b_coeffs) > 2:
            out += np.einsum('...i,...j,ijn->...n', u, u, self.b_coeffs[2])
        return out

    def map(self, x, u):
        return np.einsum('...nm,...m->...n', self.matrix(u), x) + self.offset(u)


@dataclass(frozen=True, eq=False)
class EsnModel(StateModel):
    """f(x, u) = tanh(A x + C u + b), states in [-1, 1]^n"""
    A: np.ndarray
    C: np.ndarray
    b: np.ndarray
    kind: str = field(default="esn", init=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ShapeMismatchError(f"A must be square, got {A.shape}")
        if C.shape[0] != n or b.shape != (n,):
            raise ShapeMismatchError(f"C {C.shape} and b {b.shape} must match state dim {n}")
        # SVD-based rank
        if np.linalg.matrix_rank(C) < min(C.shape):
            raise DomainError("esn input matrix C must have full rank")
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'C', C)
        object.__setattr__(self, 'b', b)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.C.shape[1]

    def map(self, x, u):
        return np.tanh(x @ self.A.T + u @ self.C.T + self.b)

    def check_states(self, x):
        if np.any(np.abs(np.asarray(x)) > 1.0):
            raise DomainError("esn states must lie in [-1, 1]^n")


@dataclass(frozen=True, eq=False)
class EulerSdeModel(StateModel):
    """Euler step of Y_s - Y_{s-h} = alpha(Y) h + beta(Y) dW with piecewise-linear coefficients

    euler_form 'drifted' is x + alpha(x) h + beta(x) u; 'paper' is 1 + alpha(x) h + beta(x) u
    with no x term.
    """
    h: float
    alpha_knots: Tuple[float, ...]
    alpha_values: Tuple[float, ...]
    beta_knots: Tuple[float, ...]
    beta_values: Tuple[float, ...]
    euler_form: str = "drifted"
    kind: str = field(default="euler_sde", init=False)

    def __post_init__(self):
        if not self.h > 0:
            raise DomainError(f"euler_sde step h must be positive, got {self.h}")
        if self.euler_form not in ("paper", "drifted"):
            raise DomainError(f"euler_form must be 'paper' or 'drifted', got '{self.euler_form}'")
        for name, knots, values in (("alpha", self.alpha_knots, self.alpha_values),
                                    ("beta", self.beta_knots, self.beta_values)):
            if len(knots) != len(values) or len(knots) < 2:
                raise DomainError(f"{name} table needs >= 2 knots with matching values")
            if np.any(np.diff(knots) <= 0):
                raise DomainError(f"{name} knots must be strictly increasing")

    @property
    def state_dim(self) -> int:
        return 1

    @property
    def input_dim(self) -> int:
        return 1

    @staticmethod
    def _table_lipschitz(knots, values) -> float:
        return float(np.max(np.abs(np.diff(values) / np.diff(knots))))

    @property
    def lipschitz_alpha(self) -> float:
        return self._table_lipschitz(self.alpha_knots, self.alpha_values)

    @property
    def lipschitz_beta(self) -> float:
        return self._table_lipschitz(self.beta_knots, self.beta_values)

    def map(self, x, u):
        # np.interp is constant outside the knot range, which keeps the tables Lipschitz
        drift = np.interp(x, self.alpha_knots, self.alpha_values)
        diffusion = np.interp(x, self.beta_knots, self.beta_values)
        base = x if self.euler_form == "drifted" else 1.0
        return base + drift * self.h + diffusion * u


def build_model(kind: str, **params) -> StateModel:
    """Factory used by the experiment configuration"""
    if kind == "garch":
        return GarchModel(omega=params["omega"], alpha=params["alpha"], beta=params["beta"])
    if kind == "linear_test":
        return LinearTestModel(a=params["a"])
    if kind == "esn":
        return EsnModel(A=params["A"], C=params["C"], b=params.get("b", np.zeros(len(params["A"]))))
    if kind == "affine":
        return AffineModel(a_coeffs=tuple(params["a_coeffs"]), b_coeffs=tuple(params["b_coeffs"]),
                           n_inputs=params["input_dim"])
    if kind == "euler_sde":
        return EulerSdeModel(h=params["h"],
                             alpha_knots=tuple(params["alpha_knots"]), alpha_values=tuple(params["alpha_values"]),
                             beta_knots=tuple(params["beta_knots"]), beta_values=tuple(params["beta_values"]),
                             euler_form=params.get("euler_form", "drifted"))
    raise DomainError(f"unknown model kind '{kind}', expected one of {MODEL_KINDS}")


def _as_point(value, dim: int, name: str) -> np.ndarray:
    point = np.atleast_1d(np.asarray(value, dtype=float))
    if point.shape != (dim,):
        raise ShapeMismatchError(f"{name} must have dim {dim}, got shape {point.shape}")
    return point


def step(model: StateModel, x, u) -> np.ndarray:
    """One application of f at a single point"""
    x = _as_point(x, model.state_dim, "state")
    u = _as_point(u, model.input_dim, "input")
    model.check_states(x)
    return model.map(x, u)


def _resolve_pad(model: StateModel, left_pad) -> np.ndarray:
    if left_pad is None:
        return model.anchor
    return _as_point(left_pad, model.state_dim, "left_pad")


def extend_states(model: StateModel, states: np.ndarray, inputs: np.ndarray,
                  left_pad=None) -> np.ndarray:
    """F on arrays shaped (..., T, dim): out[..., k] = f(states[..., k+1], inputs[..., k])"""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if states.shape[:-1] != inputs.shape[:-1]:
        raise ShapeMismatchError(f"state shape {states.shape} and input shape {inputs.shape} disagree")
    if states.shape[-1] != model.state_dim or inputs.shape[-1] != model.input_dim:
        raise ShapeMismatchError(
            f"model expects dims ({model.state_dim}, {model.input_dim}), "
            f"got ({states.shape[-1]}, {inputs.shape[-1]})")
    pad = _resolve_pad(model, left_pad)
    previous = np.empty_like(states)
    previous[..., :-1, :] = states[..., 1:, :]
    previous[..., -1, :] = pad
    return model.map(previous, inputs)


def extend_F(model: StateModel, x: PathWindow, u: PathWindow, left_pad=None) -> PathWindow:
    if x.horizon != u.horizon:
        raise ShapeMismatchError(f"state horizon {x.horizon} != input horizon {u.horizon}")
    model.check_states(x.values)
    return PathWindow(extend_states(model, x.values, u.values, left_pad))


def apply_fc(model: StateModel, pair: PathPair, left_pad=None) -> PathPair:
    """Fc(x, u) = (F(x, u), u); the input window object is passed through untouched"""
    return PathPair(state=extend_F(model, pair.state, pair.input, left_pad), input=pair.input)


def apply_fc_batch(model: StateModel, states: np.ndarray, inputs: np.ndarray,
                   left_pad=None) -> Tuple[np.ndarray, np.ndarray]:
    """Fc over a whole ensemble; the input array comes back as the same object"""
    model.check_states(states)
    return extend_states(model, states, inputs, left_pad), inputs


def garch_returns(states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """r_t = sqrt(X_t) U_{t+1} for t = -2 .. -T (U_{t+1} sits one index more recent)"""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if states.shape != inputs.shape:
        raise ShapeMismatchError(f"states {states.shape} and inputs {inputs.shape} disagree")
    return np.sqrt(states[..., 1:, :]) * inputs[..., :-1, :]


def anchor_window(model: StateModel, horizon: int) -> PathWindow:
    return PathWindow.constant(model.anchor, horizon)
