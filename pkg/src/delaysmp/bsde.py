"""Delayed BSDEs solved by Picard iteration around a regression backward Euler sweep.

The equation is

    -dy = f(t, y, y_d, z, z_d) dt - z dW,   y(T) = xi,
    y = phi, z = psi on [-delta, 0),

with ``y_d(t) = int_{t-delta}^t phi(t,s) y(s) alpha(ds)`` (and likewise for
``z``).  Each Picard sweep freezes every generator argument at the previous
iterate, which turns the problem into a classical BSDE with a known driver.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .calculus import (
    DelayKernel,
    DelayMeasure,
    SampledProcess,
    TimeGrid,
    aggregation_matrix,
    apply_matrix,
)
from .errors import AdaptednessError, ConfigurationError, MissingInitialPathError, NonConvergenceError
from .montecarlo import PathEnsemble, RegressionBasis, conditional_expectation

logger = logging.getLogger(__name__)

Generator = Callable[..., np.ndarray]


def _zero_path(t):
    return np.zeros_like(np.asarray(t, dtype=float))


@dataclass
class DelayedBSDEProblem:
    """Data of a BSDE with delayed generator.

    ``generator(t, y, yd, z, zd)`` receives arrays of shape ``(P, n)`` for the
    ``y`` arguments and ``(P, n*d)`` for the ``z`` arguments and returns
    ``(P, n)``.  Controlled problems take two further arguments ``(v, vd)``.
    ``terminal`` maps an ensemble to ``(P, n)`` values of ``xi``.
    ``aggregator`` optionally replaces the measure/kernel window integral by an
    explicit node-weight matrix builder ``grid -> sparse (n_nodes, n_nodes)``.
    """

    generator: Generator
    terminal: Callable[[PathEnsemble], np.ndarray]
    T: float
    delay: float = 0.0
    measure: Optional[DelayMeasure] = None
    kernel: Optional[DelayKernel] = None
    initial_y: Callable = _zero_path
    initial_z: Callable = _zero_path
    dims: tuple[int, int] = (1, 1)
    lipschitz_C: float = 1.0
    aggregator: Optional[Callable[[TimeGrid], sp.spmatrix]] = None
    name: str = "bsde"

    def __post_init__(self):
        if self.lipschitz_C <= 0:
            raise ConfigurationError("declared Lipschitz constant must be positive")
        if self.delay < 0:
            raise ConfigurationError("delay must be non-negative")
        if self.measure is not None and abs(self.measure.lag - self.delay) > 1e-12 * max(1.0, self.delay):
            raise ConfigurationError(f"measure lag {self.measure.lag} differs from delay {self.delay}")

    def delay_matrix(self, grid: TimeGrid) -> sp.csr_matrix:
        if self.aggregator is not None:
            return sp.csr_matrix(self.aggregator(grid))
        rows = range(grid.index_of(0.0), grid.index_of(self.T) + 1)
        return aggregation_matrix(grid, self.measure, self.kernel, "delayed", rows=rows, embed=True)


@dataclass
class PicardReport:
    n_iterations: int
    successive_diffs: list[float]
    estimated_ratio: float
    theoretical_K: Optional[float]
    converged: bool = True

    @property
    def ratios(self) -> list[float]:
        d = self.successive_diffs
        return [d[k + 1] / d[k] for k in range(len(d) - 1) if d[k] > 0]

    def as_dict(self) -> dict:
        return {
            "n_iterations": self.n_iterations,
            "successive_diffs": list(map(float, self.successive_diffs)),
            "estimated_ratio": float(self.estimated_ratio),
            "theoretical_K": None if self.theoretical_K is None else float(self.theoretical_K),
            "converged": self.converged,
        }


@dataclass
class BSDESolution:
    """Solution paths on the full grid ``[-delta, T]``.

    ``z`` at node ``T`` is not produced by the scheme; it is copied from the
    previous node and ``z_terminal_extrapolated`` says so.
    """

    y: SampledProcess
    z: SampledProcess
    generator_values: np.ndarray
    ensemble: PathEnsemble
    i0: int
    z_terminal_extrapolated: bool = True
    extras: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.y.grid

    def y0(self) -> np.ndarray:
        return self.y.values[:, self.i0, :]

    def y0_mean(self) -> np.ndarray:
        return self.y0().mean(axis=0)

    def y0_pathwise(self) -> np.ndarray:
        """``xi + sum f dt`` per path.

        The regression projections preserve cross-path means, so the mean of
        this estimator equals :meth:`y0_mean` up to the Picard tolerance and
        its spread gives the standard error of that mean.
        """
        iT = self.grid.index_of(self.grid.T)
        sl = slice(self.i0, iT)
        fsum = np.tensordot(self.generator_values[:, sl, :], self.grid.dt[sl], axes=([1], [0]))
        return self.y.values[:, iT, :] + fsum

    def y0_control_variate(self) -> np.ndarray:
        """``xi + sum f dt - sum z dW`` per path: lower variance, not mean-matched to :meth:`y0_mean`."""
        iT = self.grid.index_of(self.grid.T)
        sl = slice(self.i0, iT)
        n, nd = self.y.dim, self.z.dim
        z = self.z.values[:, sl, :].reshape(self.y.n_paths, -1, n, nd // n)
        zsum = np.einsum("pink,pik->pn", z, self.ensemble.increments[:, sl, :])
        return self.y0_pathwise() - zsum


def contraction_constant(C: float, M: float, delta: float, measure: DelayMeasure | None) -> tuple[float, float]:
    """``K = 6 C^2 delta [1 + 2 M^2 delta e alpha([-delta, 0])]`` with ``beta = 1/delta``.

    Returns ``(K, beta)``; for ``delta == 0`` the constant is 0 and ``beta`` is
    infinite (the unweighted norm is used instead).
    """
    if C <= 0 or M <= 0 or delta < 0:
        raise ValueError("need C > 0, M > 0, delta >= 0")
    if delta == 0:
        return 0.0, math.inf
    mass = 0.0 if measure is None else measure.total_mass()
    K = 6.0 * C ** 2 * delta * (1.0 + 2.0 * M ** 2 * delta * math.e * mass)
    return K, 1.0 / delta


def _beta_weights(grid: TimeGrid, delta: float, lo: int, hi: int) -> np.ndarray:
    w = np.zeros(grid.n_nodes)
    h = grid.dt[lo:hi]
    w[lo:hi] += 0.5 * h
    w[lo + 1:hi + 1] += 0.5 * h
    if delta > 0:
        w *= np.exp(grid.nodes / delta)
    return w


def _norm(diff_y: np.ndarray, diff_z: np.ndarray, w: np.ndarray) -> float:
    sq = np.sum(diff_y ** 2, axis=2) + np.sum(diff_z ** 2, axis=2)
    return float(np.sqrt(np.mean(sq @ w)))


def _geometric_ratio(diffs: list[float]) -> float:
    d = np.asarray(diffs, dtype=float)
    if d.size < 2 or d[0] <= 0:
        return 0.0
    good = d > d[0] * 1e-13
    k = np.nonzero(good)[0]
    if k.size < 2:
        return 0.0
    slope = np.polyfit(k, np.log(d[k]), 1)[0]
    return float(np.exp(slope))


def _check_grid(problem: DelayedBSDEProblem, grid: TimeGrid, ensemble: PathEnsemble) -> tuple[int, int]:
    if not np.array_equal(grid.nodes, ensemble.grid.nodes):
        raise ConfigurationError("ensemble must be generated on the solve grid")
    i0 = grid.find(0.0)
    iT = grid.find(problem.T)
    if i0 is None or iT is None:
        raise ConfigurationError("0 and T must be grid nodes")
    if grid.t_start > -problem.delay + grid._tol(problem.delay):
        raise MissingInitialPathError(f"grid starts at {grid.t_start} but the delay window needs {-problem.delay}")
    return i0, iT


def _picard(problem, gen_indexed, grid, ensemble, basis, tol, max_iter, initial=None):
    i0, iT = _check_grid(problem, grid, ensemble)
    n, d = problem.dims
    if ensemble.brownian_dim != d:
        raise ConfigurationError(f"ensemble has {ensemble.brownian_dim} Brownian components, problem needs {d}")
    P = ensemble.n_paths
    N = grid.n_nodes
    nodes = grid.nodes

    xi = np.asarray(problem.terminal(ensemble), dtype=float).reshape(P, n)
    if not np.all(np.isfinite(xi)):
        raise ValueError("terminal value must be finite on every path")

    pre = slice(0, i0)
    phi = np.asarray(problem.initial_y(nodes[pre]), dtype=float).reshape(i0, -1) if i0 else np.zeros((0, n))
    psi = np.asarray(problem.initial_z(nodes[pre]), dtype=float).reshape(i0, -1) if i0 else np.zeros((0, n * d))
    phi = np.broadcast_to(phi, (i0, n))
    psi = np.broadcast_to(psi, (i0, n * d))
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(psi))):
        raise ValueError("initial paths must be finite at every boundary node")

    if initial is None:
        Y = np.empty((P, N, n))
        Y[:, :, :] = xi.mean(axis=0)
        Z = np.zeros((P, N, n * d))
    else:
        Y, Z = (np.array(a, dtype=float) for a in initial)
    Y[:, pre, :] = phi[None]
    Z[:, pre, :] = psi[None]
    Y[:, iT, :] = xi
    Y[:, iT + 1:, :] = 0.0
    Z[:, iT + 1:, :] = 0.0

    A = problem.delay_matrix(grid)
    K = None
    if problem.delay > 0:
        M = problem.kernel.bound if problem.kernel is not None else 1.0
        K, _ = contraction_constant(problem.lipschitz_C, M, problem.delay, problem.measure)
        if K >= 1:
            logger.warning("contraction constant K=%.4g >= 1 for %s; Picard may not converge", K, problem.name)
    w = _beta_weights(grid, problem.delay, 0 if problem.delay > 0 else i0, iT)
    dW = ensemble.increments
    dt = grid.dt
    has_delay = A.nnz > 0

    diffs: list[float] = []
    F = np.zeros((P, N, n))
    for sweep in range(1, max_iter + 1):
        Yd = apply_matrix(A, Y) if has_delay else np.zeros_like(Y)
        Zd = apply_matrix(A, Z) if has_delay else np.zeros_like(Z)
        F = np.zeros((P, N, n))
        for i in range(i0, iT):
            F[:, i, :] = np.asarray(
                gen_indexed(i, float(nodes[i]), Y[:, i, :], Yd[:, i, :], Z[:, i, :], Zd[:, i, :]),
                dtype=float).reshape(P, n)
        y_new = np.array(Y)
        z_new = np.array(Z)
        y_next = xi
        for i in range(iT - 1, i0 - 1, -1):
            ey = conditional_expectation(y_next, i, ensemble, basis)
            # centring by E_i[y_{i+1}] leaves E_i[y dW] unchanged and removes
            # the O(1/sqrt(dt)) regression noise of the raw product
            prod = ((y_next - ey)[:, :, None] * dW[:, i, None, :]).reshape(P, n * d)
            z_new[:, i, :] = conditional_expectation(prod, i, ensemble, basis) / dt[i]
            y_new[:, i, :] = ey + F[:, i, :] * dt[i]
            y_next = y_new[:, i, :]
        z_new[:, iT, :] = z_new[:, iT - 1, :]
        diff = _norm(y_new - Y, z_new - Z, w)
        diffs.append(diff)
        Y, Z = y_new, z_new
        logger.debug("%s sweep %d: diff %.3e", problem.name, sweep, diff)
        if diff < tol:
            break
    else:
        raise NonConvergenceError(
            f"{problem.name}: no convergence to tol={tol:g} in {max_iter} sweeps (last diff {diffs[-1]:.3e})",
            history=diffs)

    # generator values at the converged iterate, for pathwise estimators
    Yd = apply_matrix(A, Y) if has_delay else np.zeros_like(Y)
    Zd = apply_matrix(A, Z) if has_delay else np.zeros_like(Z)
    Fsol = np.zeros((P, N, n))
    for i in range(i0, iT):
        Fsol[:, i, :] = np.asarray(
            gen_indexed(i, float(nodes[i]), Y[:, i, :], Yd[:, i, :], Z[:, i, :], Zd[:, i, :]),
            dtype=float).reshape(P, n)
    report = PicardReport(len(diffs), diffs, _geometric_ratio(diffs), K)
    solution = BSDESolution(SampledProcess(grid, Y), SampledProcess(grid, Z), Fsol, ensemble, i0,
                            extras={"yd": Yd, "zd": Zd})
    return solution, report


def picard_solve(
    problem: DelayedBSDEProblem,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    basis: RegressionBasis | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> tuple[BSDESolution, PicardReport]:
    """Fixed point of the frozen-generator map by repeated backward sweeps.

    The inner sweep is ``z_i = E_i[y_{i+1} dW_i]/dt_i`` and
    ``y_i = E_i[y_{i+1}] + f_i dt_i`` with ``f_i`` evaluated at the previous
    iterate.  Iterate differences are measured in the norm
    ``(E int |.|^2 e^{s/delta} ds)^{1/2}`` over ``[-delta, T]``.

    Raises
    ------
    NonConvergenceError
        If ``max_iter`` sweeps do not bring the difference below ``tol``.
    """
    basis = basis or RegressionBasis()
    gen = problem.generator
    return _picard(problem, lambda i, t, y, yd, z, zd: gen(t, y, yd, z, zd), grid, ensemble, basis, tol, max_iter)


def solve_classical_bsde(
    generator: Callable,
    terminal: Callable[[PathEnsemble], np.ndarray],
    T: float,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    basis: RegressionBasis | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    dims: tuple[int, int] = (1, 1),
) -> tuple[BSDESolution, PicardReport]:
    """Classical BSDE ``-dy = f(t, y, z) dt - z dW`` with the same scheme."""
    problem = DelayedBSDEProblem(
        generator=lambda t, y, yd, z, zd: generator(t, y, z), terminal=terminal, T=T, dims=dims,
        name="classical")
    return picard_solve(problem, grid, ensemble, basis, tol, max_iter)


def controlled_delay_inputs(problem: DelayedBSDEProblem, control: SampledProcess, grid: TimeGrid,
                            eta: Callable | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Control values and their delayed aggregate on ``grid``.

    A control given only on ``[0, T]`` is extended by its initial path ``eta``
    (default 0) on ``[-delta, 0)``.
    """
    if not control.adapted:
        raise AdaptednessError("control process must be adapted")
    if control.grid.n_nodes != grid.n_nodes or not np.array_equal(control.grid.nodes, grid.nodes):
        i0 = grid.index_of(control.grid.t_start)
        if i0 + control.grid.n_nodes > grid.n_nodes or not np.allclose(
                grid.nodes[i0:i0 + control.grid.n_nodes], control.grid.nodes, rtol=0, atol=1e-12):
            raise ConfigurationError("control grid is not a contiguous sub-grid of the solve grid")
        v = np.zeros((control.n_paths, grid.n_nodes, control.dim))
        v[:, i0:i0 + control.grid.n_nodes, :] = control.values
        if i0 > 0:
            if eta is None:
                logger.info("control initial path not given; using 0 on [%.4g, 0)", grid.t_start)
            else:
                v[:, :i0, :] = np.asarray(eta(grid.nodes[:i0]), dtype=float).reshape(1, i0, -1)
    else:
        v = np.asarray(control.values)
    A = problem.delay_matrix(grid)
    vd = apply_matrix(A, v) if A.nnz else np.zeros_like(v)
    return v, vd


def solve_controlled(
    problem: DelayedBSDEProblem,
    control: SampledProcess,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    basis: RegressionBasis | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    eta: Callable | None = None,
) -> tuple[BSDESolution, PicardReport]:
    """Solve the state equation under a given admissible control.

    The generator takes ``(t, y, yd, z, zd, v, vd)``; it is evaluated with the
    control and its delayed aggregate at each node and handed to
    :func:`picard_solve`'s iteration.
    """
    v, vd = controlled_delay_inputs(problem, control, grid, eta)
    basis = basis or RegressionBasis()
    gen = problem.generator

    def gen_indexed(i, t, y, yd, z, zd):
        return gen(t, y, yd, z, zd, v[:, i, :], vd[:, i, :])

    sol, rep = _picard(problem, gen_indexed, grid, ensemble, basis, tol, max_iter)
    sol.extras["v"] = v
    sol.extras["vd"] = vd
    return sol, rep
