"""Time grids, delay measures, kernels and delayed/advanced window integrals.

Every window integral is represented internally as a sparse row of weights
over grid nodes, so an aggregate over a whole process is one sparse product.
The same rows, transposed, give the advanced (forward-looking) operator used
by the duality checks.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    BoundaryOverlapError,
    ConfigurationError,
    MissingInitialPathError,
    MissingTerminalPathError,
)

logger = logging.getLogger(__name__)

_REL_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class TimeGrid:
    """Monotone time nodes with a distinguished horizon ``T``.

    ``nodes[0]`` is ``t_start`` (typically ``-delta`` or 0) and ``nodes[-1]`` is
    ``t_end`` (typically ``T`` or ``T + delta``).  ``T`` itself must be a node.
    """

    nodes: np.ndarray
    T: float
    spacing: str = "uniform"

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a grid needs at least two nodes")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("grid nodes must be strictly increasing")
        if self.spacing not in ("uniform", "graded"):
            raise ValueError(f"unknown spacing {self.spacing!r}")
        object.__setattr__(self, "nodes", _readonly(nodes))
        object.__setattr__(self, "T", float(self.T))
        if self.find(self.T) is None:
            raise ValueError(f"horizon T={self.T} is not a grid node")

    # construction -----------------------------------------------------------

    @classmethod
    def uniform(cls, t_start: float, t_end: float, n_steps: int, T: float | None = None) -> "TimeGrid":
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        nodes = t_start + (t_end - t_start) * np.arange(n_steps + 1) / n_steps
        nodes[-1] = t_end
        return cls(nodes, t_end if T is None else T, "uniform")

    @classmethod
    def for_delay(
        cls,
        T: float,
        delta: float,
        dt: float,
        before: bool = True,
        after: bool = False,
        max_denominator: int = 8,
    ) -> tuple["TimeGrid", float]:
        """Uniform grid on ``[-delta, T]`` / ``[0, T+delta]`` / ``[-delta, T+delta]``.

        The step is first adjusted so that ``T`` is a whole number of steps.
        If ``delta/dt`` is a fraction with denominator at most
        ``max_denominator`` the step is refined so that ``delta`` lands on a
        node; otherwise ``delta`` is snapped to the nearest multiple of the
        step and a warning is logged.

        Returns
        -------
        grid, delta_used
        """
        if T <= 0 or dt <= 0 or delta < 0:
            raise ValueError("need T > 0, dt > 0, delta >= 0")
        n = max(1, int(round(T / dt)))
        h = T / n
        m = 0
        if delta > 0:
            ratio = delta / h
            for q in range(1, max_denominator + 1):
                if abs(ratio * q - round(ratio * q)) < 1e-9 * max(1.0, ratio * q):
                    n *= q
                    h = T / n
                    m = int(round(ratio * q))
                    break
            else:
                m = max(1, int(round(ratio)))
                logger.warning("delay %.6g is not a grid multiple of dt=%.6g; snapped to %.6g", delta, h, m * h)
        k_lo = -m if before else 0
        k_hi = n + (m if after else 0)
        k = np.arange(k_lo, k_hi + 1)
        nodes = k * h
        nodes[k == n] = T
        return cls(nodes, T, "uniform"), m * h

    @classmethod
    def graded(cls, T: float, eps: float, growth: float = 1.01) -> "TimeGrid":
        """Mesh on ``[0, T]`` graded toward 0.

        Nodes are ``eps * (r**k - 1)``: spacing grows geometrically by ``r``
        (close to ``growth``) so it is quasi-uniform with width ``eps*(r-1)``
        below the scale ``eps`` and geometric above it.
        """
        if not (0 < eps < T) or growth <= 1:
            raise ValueError("need 0 < eps < T and growth > 1")
        n = int(math.ceil(math.log1p(T / eps) / math.log(growth)))
        log_r = math.log1p(T / eps) / n
        nodes = eps * np.expm1(log_r * np.arange(n + 1))
        nodes[0] = 0.0
        nodes[-1] = T
        return cls(nodes, T, "graded")

    # queries --------------------------------------------------------------------

    @property
    def t_start(self) -> float:
        return float(self.nodes[0])

    @property
    def t_end(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    def _tol(self, t: float) -> float:
        return _REL_TOL * max(1.0, abs(t)) * min(1.0, float(np.min(self.dt)) * 1e3)

    def find(self, t: float) -> int | None:
        """Index of the node equal to ``t`` (to rounding), or ``None``."""
        i = int(np.searchsorted(self.nodes, t))
        tol = self._tol(t)
        for j in (i - 1, i):
            if 0 <= j < self.nodes.size and abs(self.nodes[j] - t) <= tol:
                return j
        return None

    def index_of(self, t: float) -> int:
        i = self.find(t)
        if i is None:
            raise KeyError(f"t={t} is not a node of the grid")
        return i

    def locate(self, t: float) -> tuple[int, float]:
        """Return ``(i, theta)`` with ``t = (1-theta)*nodes[i] + theta*nodes[i+1]``.

        ``theta == 0`` exactly when ``t`` is a node.
        """
        j = self.find(t)
        if j is not None:
            return j, 0.0
        if t < self.t_start or t > self.t_end:
            raise ValueError(f"t={t} outside grid [{self.t_start}, {self.t_end}]")
        i = int(np.searchsorted(self.nodes, t)) - 1
        return i, float((t - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i]))

    def slice(self, t_from: float, t_to: float) -> tuple["TimeGrid", int]:
        """Sub-grid between two existing nodes, and the offset of its first node."""
        a, b = self.index_of(t_from), self.index_of(t_to)
        T = min(max(self.T, self.nodes[a]), self.nodes[b])
        if self.find(T) is None or not (a <= self.find(T) <= b):
            T = self.nodes[b]
        return TimeGrid(self.nodes[a:b + 1], T, self.spacing), a

    def trapezoid_weights(self) -> np.ndarray:
        """Node weights of the composite trapezoid rule on the whole grid."""
        h = self.dt
        w = np.zeros(self.n_nodes)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        return w


# ----------------------------------------------------------------------------
# measures and kernels


class MeasureKind(enum.Enum):
    DIRAC = "dirac"
    LEBESGUE = "lebesgue"
    ATOMS = "atoms"


@dataclass(frozen=True)
class DelayMeasure:
    """Measure on the lag window ``[-lag, 0]``.

    ``atoms`` holds ``(offset, weight)`` pairs for :attr:`MeasureKind.ATOMS`;
    offsets lie in ``[-lag, 0]``.
    """

    kind: MeasureKind
    lag: float
    atoms: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.lag < 0:
            raise ValueError("lag must be >= 0")
        if self.kind is MeasureKind.ATOMS:
            for r, w in self.atoms:
                if not (-self.lag - 1e-12 <= r <= 1e-12) or w < 0:
                    raise ValueError(f"atom ({r}, {w}) outside [-lag, 0] or negative")

    @classmethod
    def dirac(cls, lag: float) -> "DelayMeasure":
        return cls(MeasureKind.DIRAC, float(lag))

    @classmethod
    def lebesgue(cls, lag: float) -> "DelayMeasure":
        return cls(MeasureKind.LEBESGUE, float(lag))

    @classmethod
    def finite_atoms(cls, atoms: Sequence[tuple[float, float]], lag: float | None = None) -> "DelayMeasure":
        atoms = tuple((float(r), float(w)) for r, w in atoms)
        if lag is None:
            lag = max((-r for r, _ in atoms), default=0.0)
        return cls(MeasureKind.ATOMS, float(lag), atoms)

    def total_mass(self) -> float:
        if self.kind is MeasureKind.DIRAC:
            return 1.0
        if self.kind is MeasureKind.LEBESGUE:
            return self.lag
        return float(sum(w for _, w in self.atoms))

    def point_masses(self) -> tuple[tuple[float, float], ...]:
        """Atoms as ``(offset, weight)``; Dirac is the single atom ``(-lag, 1)``."""
        if self.kind is MeasureKind.DIRAC:
            return ((-self.lag, 1.0),)
        if self.kind is MeasureKind.ATOMS:
            return self.atoms
        raise ValueError("Lebesgue measure has no atoms")


@dataclass(frozen=True)
class DelayKernel:
    """Deterministic bounded weight ``phi(t, s)`` with declared bound ``M``."""

    evaluator: Callable[[float, np.ndarray], np.ndarray]
    bound: float = 1.0

    def __post_init__(self):
        if self.bound <= 0:
            raise ValueError("kernel bound must be positive")

    @classmethod
    def constant(cls, value: float = 1.0) -> "DelayKernel":
        value = float(value)
        return cls(lambda t, s: np.full(np.shape(s), value), bound=max(abs(value), 1e-300))

    def __call__(self, t: float, s) -> np.ndarray:
        return np.asarray(self.evaluator(t, np.asarray(s, dtype=float)), dtype=float)

    def transposed(self) -> "DelayKernel":
        ev = self.evaluator
        return DelayKernel(lambda t, s: np.asarray(ev(s, t), dtype=float) * np.ones(np.shape(s)), self.bound)

    def check_bound(self, t: np.ndarray, s: np.ndarray) -> bool:
        vals = np.array([self(ti, si) for ti, si in zip(np.ravel(t), np.ravel(s))])
        return bool(np.all(np.abs(vals) <= self.bound * (1 + 1e-12)))


# ----------------------------------------------------------------------------
# sampled processes


@dataclass(frozen=True)
class SampledProcess:
    """Ensemble of paths sampled on a grid; ``values`` is ``(n_paths, n_nodes, dim)``."""

    grid: TimeGrid
    values: np.ndarray
    adapted: bool = True

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[1] != self.grid.n_nodes:
            raise ValueError(
                f"values shape {v.shape} incompatible with grid of {self.grid.n_nodes} nodes")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def at(self, i: int) -> np.ndarray:
        return self.values[:, i, :]

    @classmethod
    def deterministic(cls, grid: TimeGrid, fn: Callable, n_paths: int, dim: int = 1) -> "SampledProcess":
        vals = _eval_path_fn(fn, grid.nodes, dim)
        return cls(grid, np.broadcast_to(vals, (n_paths,) + vals.shape).copy())

    @classmethod
    def zeros(cls, grid: TimeGrid, n_paths: int, dim: int = 1) -> "SampledProcess":
        return cls(grid, np.zeros((n_paths, grid.n_nodes, dim)))

    def time_reversed(self, pivot: float = 0.0) -> "SampledProcess":
        """Process ``s -> proc(2*pivot - s)`` on the mirrored grid."""
        nodes = 2 * pivot - self.grid.nodes[::-1]
        T = 2 * pivot - self.grid.t_start
        return SampledProcess(TimeGrid(nodes, T, self.grid.spacing), self.values[:, ::-1, :], self.adapted)


def _eval_path_fn(fn, t: np.ndarray, dim: int) -> np.ndarray:
    vals = np.asarray(fn(np.asarray(t, dtype=float)), dtype=float)
    if vals.ndim == 0:
        vals = np.full((t.size, dim), float(vals))
    elif vals.ndim == 1:
        vals = np.repeat(vals[:, None], dim, axis=1) if vals.shape[0] == t.size else np.broadcast_to(vals, (t.size, dim))
    if vals.shape != (t.size, dim):
        raise ValueError(f"path function returned shape {vals.shape}, expected {(t.size, dim)}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("boundary path must be finite at every node")
    return vals


# ----------------------------------------------------------------------------
# window weights


def _point_row(grid: TimeGrid, s: float, strict: bool) -> tuple[list[int], list[float]]:
    i, theta = grid.locate(s)
    if theta == 0.0:
        return [i], [1.0]
    if strict:
        raise ConfigurationError(f"offset point s={s} is not a grid node (strict mode)")
    return [i, i + 1], [1.0 - theta, theta]


def window_weights(
    grid: TimeGrid,
    t: float,
    measure: DelayMeasure,
    kernel: DelayKernel,
    direction: str = "delayed",
    strict: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Node indices and weights of the window integral at time ``t``.

    For ``direction="delayed"`` the integral is over ``[t-lag, t]`` with the
    measure as given; for ``"advanced"`` it is over ``[t, t+lag]`` with the
    measure reflected onto ``[0, lag]``.  ``kernel(t, s)`` multiplies the
    integrand.  Lebesgue windows use the trapezoid rule on the grid nodes in
    the window, with interpolated end points when these fall between nodes.
    """
    if direction not in ("delayed", "advanced"):
        raise ValueError(f"direction must be 'delayed' or 'advanced', got {direction!r}")
    lo, hi = (t - measure.lag, t) if direction == "delayed" else (t, t + measure.lag)
    tol = grid._tol(t)
    if lo < grid.t_start - tol:
        raise MissingInitialPathError(
            f"window [{lo:.6g}, {hi:.6g}] starts before grid start {grid.t_start:.6g}; splice an initial path")
    if hi > grid.t_end + tol:
        raise MissingTerminalPathError(
            f"window [{lo:.6g}, {hi:.6g}] ends after grid end {grid.t_end:.6g}; splice a terminal path")
    lo, hi = max(lo, grid.t_start), min(hi, grid.t_end)

    idx: list[int] = []
    wts: list[float] = []
    if measure.kind is MeasureKind.LEBESGUE:
        if measure.lag == 0:
            return np.zeros(0, dtype=int), np.zeros(0)
        ia, ib = grid.find(lo), grid.find(hi)
        inner_lo = ia + 1 if ia is not None else int(np.searchsorted(grid.nodes, lo))
        inner_hi = ib - 1 if ib is not None else int(np.searchsorted(grid.nodes, hi)) - 1
        pts = [lo] + [float(x) for x in grid.nodes[inner_lo:inner_hi + 1]] + [hi]
        pts = np.array(pts)
        h = np.diff(pts)
        qw = np.zeros(pts.size)
        qw[:-1] += 0.5 * h
        qw[1:] += 0.5 * h
        phi = kernel(t, pts)
        for s, q, f in zip(pts, qw, phi):
            ii, ww = _point_row(grid, float(s), strict=False)
            idx.extend(ii)
            wts.extend(q * f * w for w in ww)
    else:
        for r, w in measure.point_masses():
            s = t + r if direction == "delayed" else t - r
            ii, ww = _point_row(grid, s, strict)
            f = float(kernel(t, np.array([s]))[0])
            idx.extend(ii)
            wts.extend(w * f * x for x in ww)
    return np.asarray(idx, dtype=int), np.asarray(wts, dtype=float)


def aggregation_matrix(
    grid: TimeGrid,
    measure: DelayMeasure | None,
    kernel: DelayKernel | None = None,
    direction: str = "delayed",
    rows: Sequence[int] | None = None,
    strict: bool = False,
    mask_after: float | None = None,
    embed: bool = False,
) -> sp.csr_matrix:
    """Sparse ``(len(rows), n_nodes)`` matrix of window weights.

    Row ``k`` holds the weights for target node ``rows[k]``; with
    ``embed=True`` the matrix is square and row ``i`` belongs to node ``i``
    (rows outside ``rows`` are zero).  A missing measure gives the zero
    matrix.  ``mask_after`` drops contributions from nodes strictly later than
    that time (the indicator of ``[0, T]`` in adjoint integrals).
    """
    rows = list(range(grid.n_nodes)) if rows is None else list(rows)
    n = grid.n_nodes
    n_rows = n if embed else len(rows)
    if measure is None or measure.total_mass() == 0:
        return sp.csr_matrix((n_rows, n))
    kernel = kernel or DelayKernel.constant(1.0)
    r_idx, c_idx, vals = [], [], []
    for k, i in enumerate(rows):
        ii, ww = window_weights(grid, float(grid.nodes[i]), measure, kernel, direction, strict)
        r_idx.extend([i if embed else k] * len(ii))
        c_idx.extend(ii)
        vals.extend(ww)
    m = sp.coo_matrix((vals, (r_idx, c_idx)), shape=(n_rows, n)).tocsr()
    m.sum_duplicates()
    if mask_after is not None:
        cut = grid.find(mask_after)
        keep = grid.nodes <= (grid.nodes[cut] if cut is not None else mask_after)
        m = m @ sp.diags(keep.astype(float))
        m = m.tocsr()
        m.eliminate_zeros()
    return m


def running_average_matrix(grid: TimeGrid, rows: Sequence[int] | None = None) -> sp.csr_matrix:
    """Weights of ``(1/t) * int_0^t y(u) du`` by the trapezoid rule.

    At ``t = 0`` the average is the limit value ``y(0)``.  Only nodes at or
    after 0 contribute.
    """
    rows = list(range(grid.n_nodes)) if rows is None else list(rows)
    i0 = grid.index_of(0.0)
    r_idx, c_idx, vals = [], [], []
    for k, i in enumerate(rows):
        t = grid.nodes[i]
        if i < i0:
            continue
        if i == i0:
            r_idx.append(k), c_idx.append(i0), vals.append(1.0)
            continue
        h = np.diff(grid.nodes[i0:i + 1])
        w = np.zeros(i - i0 + 1)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        r_idx.extend([k] * w.size)
        c_idx.extend(range(i0, i + 1))
        vals.extend(w / t)
    return sp.coo_matrix((vals, (r_idx, c_idx)), shape=(len(rows), grid.n_nodes)).tocsr()


DENSE_FILL = 0.05


def apply_matrix(matrix: sp.spmatrix, values: np.ndarray) -> np.ndarray:
    """Apply a node-weight matrix to ``(n_paths, n_nodes, dim)`` values."""
    P, N, d = values.shape
    flat = np.ascontiguousarray(values.transpose(1, 0, 2)).reshape(N, P * d)
    rows, cols = matrix.shape
    if sp.issparse(matrix) and matrix.nnz > DENSE_FILL * rows * cols:
        # running averages fill half the matrix; BLAS beats the sparse kernel there
        matrix = matrix.toarray()
    out = matrix @ flat
    return np.asarray(out).reshape(matrix.shape[0], P, d).transpose(1, 0, 2)


def _aggregate(proc: SampledProcess, t_index: int, measure, kernel, direction, strict) -> np.ndarray:
    kernel = kernel or DelayKernel.constant(1.0)
    t = float(proc.grid.nodes[t_index])
    idx, w = window_weights(proc.grid, t, measure, kernel, direction, strict)
    if idx.size == 0:
        return np.zeros((proc.n_paths, proc.dim))
    return np.tensordot(proc.values[:, idx, :], w, axes=([1], [0]))


def delayed_aggregate(
    proc: SampledProcess,
    t_index: int,
    measure: DelayMeasure,
    kernel: DelayKernel | None = None,
    strict: bool = False,
) -> np.ndarray:
    """``int_{t-lag}^{t} phi(t,s) proc(s) alpha(ds)`` per path, shape ``(n_paths, dim)``."""
    return _aggregate(proc, t_index, measure, kernel, "delayed", strict)


def advanced_aggregate(
    proc: SampledProcess,
    t_index: int,
    measure: DelayMeasure,
    kernel: DelayKernel | None = None,
    strict: bool = False,
) -> np.ndarray:
    """``int_t^{t+lag} phi(t,s) proc(s) alpha(ds)`` with the measure reflected to ``[0, lag]``."""
    return _aggregate(proc, t_index, measure, kernel, "advanced", strict)


def exp_weighted_mass(measure: DelayMeasure, beta: float, direction: str = "delayed") -> float:
    """Exponentially weighted mass entering the contraction constants.

    ``delayed``: ``int_{-lag}^0 exp(-beta r) alpha(dr)``; ``advanced``:
    ``int_0^lag exp(beta s) alpha(ds)`` for the reflected measure.  The two
    coincide because reflection maps ``r`` to ``s = -r``.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if direction not in ("delayed", "advanced"):
        raise ValueError(f"direction must be 'delayed' or 'advanced', got {direction!r}")
    if measure.kind is MeasureKind.LEBESGUE:
        if beta == 0:
            return measure.lag
        return math.expm1(beta * measure.lag) / beta
    return float(sum(w * math.exp(-beta * r) for r, w in measure.point_masses()))


def splice_boundary_path(
    proc: SampledProcess,
    path_fn: Callable,
    segment: str,
    window: tuple[float, float] | None = None,
) -> SampledProcess:
    """Overwrite (or append) a deterministic boundary segment on every path.

    ``segment`` is ``"initial"`` (nodes in ``[t_start, 0)``) or ``"terminal"``
    (nodes in ``(T, t_end]``).  If ``window`` reaches beyond the current grid
    the grid is extended with its own boundary spacing.  A window that cuts
    into the solve interval ``[0, T]`` raises :class:`BoundaryOverlapError`.
    """
    grid = proc.grid
    T = grid.T
    if segment == "initial":
        a, b = window if window is not None else (grid.t_start, 0.0)
        if b > 0.0 + grid._tol(0.0) or a > b:
            raise BoundaryOverlapError(f"initial segment [{a}, {b}) overlaps the solve window [0, {T}]")
    elif segment == "terminal":
        a, b = window if window is not None else (T, grid.t_end)
        if a < T - grid._tol(T) or a > b:
            raise BoundaryOverlapError(f"terminal segment ({a}, {b}] overlaps the solve window [0, {T}]")
    else:
        raise ValueError("segment must be 'initial' or 'terminal'")

    values = np.array(proc.values)
    nodes = grid.nodes
    if segment == "initial" and a < grid.t_start - grid._tol(a):
        h = float(grid.dt[0])
        k = int(math.ceil((grid.t_start - a) / h - 1e-9))
        extra = grid.t_start - h * np.arange(k, 0, -1)
        nodes = np.concatenate([extra, nodes])
        values = np.concatenate([np.zeros((proc.n_paths, k, proc.dim)), values], axis=1)
    if segment == "terminal" and b > grid.t_end + grid._tol(b):
        h = float(grid.dt[-1])
        k = int(math.ceil((b - grid.t_end) / h - 1e-9))
        extra = grid.t_end + h * np.arange(1, k + 1)
        nodes = np.concatenate([nodes, extra])
        values = np.concatenate([values, np.zeros((proc.n_paths, k, proc.dim))], axis=1)
    new_grid = grid if nodes is grid.nodes else TimeGrid(nodes, T, grid.spacing)

    if segment == "initial":
        sel = new_grid.nodes < 0.0 - new_grid._tol(0.0)
    else:
        sel = new_grid.nodes > T + new_grid._tol(T)
    if np.any(sel):
        seg_vals = _eval_path_fn(path_fn, new_grid.nodes[sel], proc.dim)
        values[:, sel, :] = seg_vals[None, :, :]
    return SampledProcess(new_grid, values, proc.adapted)
