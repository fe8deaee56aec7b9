#!/usr/bin/env python3
"""
Input Service - stochesp
Hidden-input sampling and causal input-generating filters.

Key responsibilities:
- HiddenSampler: iid marginals on a counter-based generator, one substream per path
- CausalFilter: identity / fir / pointwise / compose / time_scale applied windowwise
- Ensemble: N equally weighted path windows (inputs, optional hidden draws and states)
- CSV dump and load of ensembles (path,t,component,value)

External dependencies:
- numpy (Philox bit generator, SeedSequence substreams)
- scipy.stats for analytic marginal moments
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import stats

from core.error_handler import DomainError, ShapeMismatchError
from core.settings import settings
from core.utilities import CsvUtilities, ParallelUtilities
from services.sequence_space import PathPair, PathWindow

logger = logging.getLogger(__name__)

HIDDEN_DISTS = ("std_normal", "uniform", "rademacher", "student_t")
FILTER_KINDS = ("identity", "fir", "pointwise", "compose", "time_scale")

POINTWISE_MAPS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "tanh": np.tanh,
    "sign": np.sign,
    "abs": np.abs,
    "square": np.square,
    "cube": lambda z: z * z * z,
    "clip_unit": lambda z: np.clip(z, -1.0, 1.0),
}


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != ndim:
        raise ShapeMismatchError(f"{name} must have {ndim} axes, got shape {arr.shape}")
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class HiddenSampler:
    """Independent hidden marginals Z_t; path i draws from its own Philox substream"""
    dist: str = "std_normal"
    dim: int = 1
    seed: int = 0
    low: float = 0.0
    high: float = 1.0
    nu: float = 5.0
    scale: float = 1.0

    def __post_init__(self):
        if self.dist not in HIDDEN_DISTS:
            raise DomainError(f"unknown hidden distribution '{self.dist}', expected one of {HIDDEN_DISTS}")
        if self.dim < 1:
            raise DomainError(f"sampler dim must be >= 1, got {self.dim}")
        if not 0 <= self.seed < 2 ** 64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.dist == "uniform" and not self.low < self.high:
            raise DomainError(f"uniform needs low < high, got ({self.low}, {self.high})")
        if self.dist == "student_t" and not self.nu > 0:
            raise DomainError(f"student_t needs nu > 0, got {self.nu}")
        if not self.scale > 0:
            raise DomainError(f"sampler scale must be positive, got {self.scale}")

    @property
    def identifier(self) -> str:
        extra = {"uniform": f"({self.low},{self.high})", "student_t": f"({self.nu})"}.get(self.dist, "")
        scaled = f"*{self.scale:g}" if self.scale != 1.0 else ""
        return f"{self.dist}{extra}{scaled}[{self.dim}]"

    def generator(self, path_index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(path_index,))))

    def draw_path(self, path_index: int, horizon: int) -> np.ndarray:
        """(T, dim) draws for one path; depends only on (seed, path_index)"""
        rng = self.generator(path_index)
        size = (horizon, self.dim)
        if self.dist == "std_normal":
            draws = rng.standard_normal(size)
        elif self.dist == "uniform":
            draws = rng.uniform(self.low, self.high, size)
        elif self.dist == "rademacher":
            draws = np.where(rng.integers(0, 2, size) == 1, 1.0, -1.0)
        else:
            draws = rng.standard_t(self.nu, size)
        return draws * self.scale if self.scale != 1.0 else draws

    def draw_block(self, start: int, stop: int, horizon: int) -> np.ndarray:
        out = np.empty((stop - start, horizon, self.dim))
        for offset, path_index in enumerate(range(start, stop)):
            out[offset] = self.draw_path(path_index, horizon)
        return out

    def _frozen_law(self):
        if self.dist == "std_normal":
            return stats.norm(scale=self.scale)
        if self.dist == "uniform":
            return stats.uniform(loc=self.low * self.scale, scale=(self.high - self.low) * self.scale)
        if self.dist == "student_t":
            return stats.t(self.nu, scale=self.scale)
        return None

    def has_moment(self, k: float) -> bool:
        return self.dist != "student_t" or k < self.nu

    def moment(self, k: float) -> float:
        """Absolute moment E|Z|^k of one coordinate; inf where it does not exist"""
        if k < 0:
            raise DomainError(f"moment order must be >= 0, got {k}")
        if k == 0:
            return 1.0
        if self.dist == "rademacher":
            return self.scale ** k
        if not self.has_moment(k):
            return math.inf
        if self.dist == "std_normal":
            return float(self.scale ** k * 2 ** (k / 2) * math.gamma((k + 1) / 2) / math.sqrt(math.pi))
        law = self._frozen_law()
        if float(k).is_integer() and (int(k) % 2 == 0 or self.dist == "uniform" and self.low >= 0):
            return float(law.moment(int(k)))
        return float(law.expect(lambda z: np.abs(z) ** k))

    @property
    def variance(self) -> float:
        law = self._frozen_law()
        if law is None:
            return self.scale ** 2
        return float(law.var())


def _kernel_array(kernel) -> np.ndarray:
    arr = np.asarray(kernel, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None, None]
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ShapeMismatchError(f"fir kernel must be shaped (K, out, in), got {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CausalFilter:
    """V applied windowwise; output at time t only reads hidden entries at times <= t"""
    kind: str
    input_dim: int
    kernel: Optional[np.ndarray] = field(default=None, repr=False)
    phi: Optional[str] = None
    children: Tuple["CausalFilter", ...] = ()
    start: float = 1.0
    end: float = 1.0

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise DomainError(f"unknown filter kind '{self.kind}', expected one of {FILTER_KINDS}")
        if self.kind == "pointwise" and self.phi not in POINTWISE_MAPS:
            raise DomainError(f"unknown pointwise map '{self.phi}', expected one of {sorted(POINTWISE_MAPS)}")
        if self.kind == "fir":
            kernel = _kernel_array(self.kernel)
            if kernel.shape[2] != self.input_dim:
                raise ShapeMismatchError(
                    f"fir kernel reads {kernel.shape[2]} hidden components, filter input dim is {self.input_dim}")
            object.__setattr__(self, 'kernel', kernel)
        if self.kind == "compose":
            if not self.children:
                raise DomainError("compose needs at least one filter")
            dim = self.input_dim
            for child in self.children:
                if child.input_dim != dim:
                    raise ShapeMismatchError(
                        f"compose stage '{child.kind}' expects dim {child.input_dim}, receives {dim}")
                dim = child.output_dim

    @classmethod
    def identity(cls, dim: int = 1) -> "CausalFilter":
        return cls("identity", dim)

    @classmethod
    def fir(cls, kernel) -> "CausalFilter":
        arr = _kernel_array(kernel)
        return cls("fir", arr.shape[2], kernel=arr)

    @classmethod
    def pointwise(cls, phi: str, dim: int = 1) -> "CausalFilter":
        return cls("pointwise", dim, phi=phi)

    @classmethod
    def compose(cls, *filters: "CausalFilter") -> "CausalFilter":
        """Filters applied left to right"""
        if not filters:
            raise DomainError("compose needs at least one filter")
        return cls("compose", filters[0].input_dim, children=tuple(filters))

    @classmethod
    def time_scale(cls, start: float, end: float, dim: int = 1) -> "CausalFilter":
        """Multiply the entry at the oldest window time by `start`, at time -1 by `end`, linear between"""
        return cls("time_scale", dim, start=float(start), end=float(end))

    @property
    def output_dim(self) -> int:
        if self.kind == "fir":
            return self.kernel.shape[1]
        if self.kind == "compose":
            return self.children[-1].output_dim
        return self.input_dim

    @property
    def memoryless(self) -> bool:
        if self.kind == "fir":
            return self.kernel.shape[0] == 1
        if self.kind == "compose":
            return all(child.memoryless for child in self.children)
        return True

    @property
    def time_invariant(self) -> bool:
        if self.kind == "time_scale":
            return self.start == self.end
        if self.kind == "compose":
            return all(child.time_invariant for child in self.children)
        return True

    @property
    def identifier(self) -> str:
        if self.kind == "fir":
            return f"fir[K={self.kernel.shape[0]},{self.kernel.shape[1]}x{self.kernel.shape[2]}]"
        if self.kind == "pointwise":
            return f"pointwise[{self.phi}]"
        if self.kind == "compose":
            return "compose(" + ",".join(child.identifier for child in self.children) + ")"
        if self.kind == "time_scale":
            return f"time_scale[{self.start:g}->{self.end:g}]"
        return "identity"

    def apply_array(self, z: np.ndarray) -> np.ndarray:
        """Filter arrays shaped (..., T, input_dim)"""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.input_dim:
            raise ShapeMismatchError(f"filter expects dim {self.input_dim}, got {z.shape[-1]}")
        if self.kind == "identity":
            return z
        if self.kind == "pointwise":
            return POINTWISE_MAPS[self.phi](z)
        if self.kind == "time_scale":
            horizon = z.shape[-2]
            # index k holds time -(k+1): k = 0 gets `end`, k = T-1 gets `start`
            factors = np.linspace(self.end, self.start, horizon) if horizon > 1 else np.array([self.end])
            return z * factors[:, None]
        if self.kind == "compose":
            out = z
            for child in self.children:
                out = child.apply_array(out)
            return out
        horizon = z.shape[-2]
        out = np.zeros(z.shape[:-1] + (self.output_dim,))
        # lag j reads the entry j steps older; lags past the window edge see zeros
        for lag in range(min(self.kernel.shape[0], horizon)):
            out[..., :horizon - lag, :] += z[..., lag:, :] @ self.kernel[lag].T
        return out


def apply_filter(V: CausalFilter, z: PathWindow) -> PathWindow:
    return PathWindow(V.apply_array(z.values))


@dataclass(frozen=True, eq=False)
class Ensemble:
    """N equally weighted paths; arrays are (N, T, dim) and read-only"""
    inputs: np.ndarray = field(repr=False)
    hidden: Optional[np.ndarray] = field(default=None, repr=False)
    states: Optional[np.ndarray] = field(default=None, repr=False)
    seed: Optional[int] = None
    sampler_id: str = ""
    filter_id: str = ""

    def __post_init__(self):
        inputs = _frozen_array(self.inputs, 3, "inputs")
        object.__setattr__(self, 'inputs', inputs)
        n, horizon = inputs.shape[:2]
        if n < 1 or horizon < 1:
            raise DomainError(f"ensemble needs at least one path and one time, got shape {inputs.shape}")
        for name in ("hidden", "states"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = _frozen_array(arr, 3, name)
            if arr.shape[:2] != (n, horizon):
                raise ShapeMismatchError(f"{name} shape {arr.shape} does not match inputs {inputs.shape}")
            object.__setattr__(self, name, arr)

    @property
    def n_paths(self) -> int:
        return self.inputs.shape[0]

    @property
    def horizon(self) -> int:
        return self.inputs.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[2]

    @property
    def state_dim(self) -> Optional[int]:
        return None if self.states is None else self.states.shape[2]

    def with_states(self, states: np.ndarray) -> "Ensemble":
        return replace(self, states=states)

    def pair(self, index: int) -> PathPair:
        if self.states is None:
            raise DomainError("ensemble carries no states yet")
        return PathPair(state=PathWindow(self.states[index]), input=PathWindow(self.inputs[index]))

    def subset(self, indices) -> "Ensemble":
        indices = np.asarray(indices)
        inputs = self.inputs[indices]
        inputs.setflags(write=False)
        if self.hidden is None or self.hidden is self.inputs:
            hidden = None if self.hidden is None else inputs
        else:
            hidden = self.hidden[indices]
        return replace(self,
                       inputs=inputs,
                       hidden=hidden,
                       states=None if self.states is None else self.states[indices])


def _resolve_parallel(threads: Optional[int], chunk: Optional[int]) -> Tuple[int, int]:
    return (settings.threads if threads is None else max(1, int(threads)),
            settings.path_chunk if chunk is None else max(1, int(chunk)))


def sample_hidden(s: HiddenSampler, n_paths: int, horizon: int,
                  threads: Optional[int] = None, chunk: Optional[int] = None) -> Ensemble:
    if n_paths < 1 or horizon < 1:
        raise DomainError(f"n_paths and horizon must be >= 1, got ({n_paths}, {horizon})")
    threads, chunk = _resolve_parallel(threads, chunk)
    blocks = ParallelUtilities.map_chunks(
        lambda start, stop: s.draw_block(start, stop, horizon), n_paths, chunk, threads)
    hidden = np.concatenate(blocks, axis=0)
    hidden.setflags(write=False)
    logger.debug(f"🎲 Sampled {n_paths} hidden paths of length {horizon} from {s.identifier} (seed {s.seed})")
    return Ensemble(inputs=hidden, hidden=hidden, seed=s.seed, sampler_id=s.identifier, filter_id="identity")


def generate_inputs(s: HiddenSampler, V: CausalFilter, n_paths: int, horizon: int,
                    threads: Optional[int] = None, chunk: Optional[int] = None) -> Ensemble:
    """Ū = V(Z̄) per path; the hidden draws are kept alongside"""
    if V.input_dim != s.dim:
        raise ShapeMismatchError(f"filter reads dim {V.input_dim}, sampler draws dim {s.dim}")
    hidden = sample_hidden(s, n_paths, horizon, threads, chunk)
    if V.kind == "identity":
        return hidden
    observed = V.apply_array(hidden.hidden)
    return Ensemble(inputs=observed, hidden=hidden.hidden, seed=s.seed,
                    sampler_id=s.identifier, filter_id=V.identifier)


def _component_blocks(ensemble: Ensemble):
    blocks = []
    if ensemble.states is not None:
        blocks.append(("x", ensemble.states))
    blocks.append(("u", ensemble.inputs))
    if ensemble.hidden is not None and ensemble.hidden is not ensemble.inputs:
        blocks.append(("z", ensemble.hidden))
    return blocks


def ensemble_rows(ensemble: Ensemble, max_paths: Optional[int] = None):
    n_paths = ensemble.n_paths if max_paths is None else min(max_paths, ensemble.n_paths)
    blocks = _component_blocks(ensemble)
    for i in range(n_paths):
        for k in range(ensemble.horizon):
            t = -(k + 1)
            for prefix, arr in blocks:
                for c in range(arr.shape[2]):
                    yield (i, t, f"{prefix}{c}", float(arr[i, k, c]))


def save_ensemble_csv(ensemble: Ensemble, path, max_paths: Optional[int] = None):
    """One row per (path, t, component); components x0.., u0.., z0.."""
    return CsvUtilities.write(path, ("path", "t", "component", "value"),
                              ensemble_rows(ensemble, max_paths))


def load_ensemble_csv(path) -> Ensemble:
    header, rows = CsvUtilities.read(path)
    if header != ["path", "t", "component", "value"]:
        raise DomainError(f"unexpected ensemble CSV header {header}")
    if not rows:
        raise DomainError("ensemble CSV has no rows")
    n_paths = max(int(r[0]) for r in rows) + 1
    horizon = max(-int(r[1]) for r in rows)
    dims: Dict[str, int] = {}
    for r in rows:
        prefix, index = r[2][0], int(r[2][1:])
        dims[prefix] = max(dims.get(prefix, 0), index + 1)
    if "u" not in dims:
        raise DomainError("ensemble CSV carries no input components")
    arrays = {prefix: np.full((n_paths, horizon, dim), np.nan) for prefix, dim in dims.items()}
    for r in rows:
        arrays[r[2][0]][int(r[0]), -int(r[1]) - 1, int(r[2][1:])] = float(r[3])
    for prefix, arr in arrays.items():
        if np.isnan(arr).any():
            raise DomainError(f"ensemble CSV is missing entries for component group '{prefix}'")
    return Ensemble(inputs=arrays["u"], hidden=arrays.get("z"), states=arrays.get("x"))
