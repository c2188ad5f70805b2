"""Time-advanced SDEs and the exponential-martingale decomposition.

The equation is

    dx = b(t, x, A_b) dt + sigma(t, x, A_s) dW  on [0, T],
    x(0) = x0,  x = lambda on (T, T + delta],

where ``A_b, A_s`` are conditional expectations ``E[. | F_t]`` of advanced
window integrals of the solution.  Picard iteration freezes the advanced
functionals at the previous iterate, so every sweep is a plain Euler-Maruyama
pass and remains adapted.
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
    exp_weighted_mass,
)
from .bsde import PicardReport, _geometric_ratio
from .errors import ConfigurationError, DomainError, NonConvergenceError, StructureError
from .montecarlo import (
    PathEnsemble,
    RegressionBasis,
    conditional_expectation,
    exponential_martingale,
)

logger = logging.getLogger(__name__)


def _zero_path(t):
    return np.zeros_like(np.asarray(t, dtype=float))


def _identity_integrand(t, x):
    return x


@dataclass
class ASDEProblem:
    """Advanced SDE data.

    ``drift(t, x, adv)`` and ``diffusion(t, x, adv)`` receive the state
    ``(P, n)`` and the advanced functional ``(P, k)`` and return ``(P, n)``
    and ``(P, n*d)``.  The advanced functional of the drift is
    ``E[ int_t^{t+delta} phi(t,s) G_b(s, X(s)) alpha(ds) | F_t ]`` with
    ``G_b = drift_integrand`` (identity by default); likewise for the
    diffusion.  With ``horizon_indicator`` the window integral only sees
    ``s <= T``.  ``advanced_matrix`` overrides the window weights with an
    explicit builder ``grid -> sparse (n_nodes, n_nodes)``.
    """

    drift: Callable
    diffusion: Callable
    x0: float | np.ndarray
    T: float
    terminal_path: Callable = _zero_path
    delay: float = 0.0
    measure: Optional[DelayMeasure] = None
    kernel: Optional[DelayKernel] = None
    lipschitz_C: float = 1.0
    drift_integrand: Callable = _identity_integrand
    diffusion_integrand: Callable = _identity_integrand
    horizon_indicator: bool = False
    advanced_matrix: Optional[Callable[[TimeGrid], sp.spmatrix]] = None
    dims: tuple[int, int] = (1, 1)
    terminal_path_given: bool = True
    name: str = "asde"

    def __post_init__(self):
        if self.lipschitz_C <= 0:
            raise ConfigurationError("declared Lipschitz constant must be positive")
        if self.horizon_indicator and self.terminal_path is _zero_path:
            logger.info("%s: terminal path is masked by the horizon indicator; the default 0 is redundant",
                        self.name)

    def window_matrix(self, grid: TimeGrid) -> sp.csr_matrix:
        if self.advanced_matrix is not None:
            return sp.csr_matrix(self.advanced_matrix(grid))
        rows = range(grid.index_of(0.0), grid.index_of(self.T) + 1)
        return aggregation_matrix(grid, self.measure, self.kernel, "advanced", rows=rows, embed=True,
                                  mask_after=self.T if self.horizon_indicator else None)


@dataclass
class ASDESolution:
    """Solution on ``[0, t_end]``; ``offset`` is the index of node 0 in the input grid."""

    x: SampledProcess
    offset: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.x.grid

    def embed(self, grid: TimeGrid, fill: float = 0.0) -> np.ndarray:
        """Values on a larger grid that contains this one as a contiguous block."""
        out = np.full((self.x.n_paths, grid.n_nodes, self.x.dim), fill)
        a = grid.index_of(self.grid.t_start)
        out[:, a:a + self.grid.n_nodes, :] = self.x.values
        return out


@dataclass(frozen=True)
class ASDEConstant:
    K_prime: float
    beta: float
    bound_form: Optional[float]


def asde_contraction_constant(C: float, M: float, delta: float, measure: DelayMeasure | None,
                              beta: float | None = None) -> ASDEConstant:
    """``K' = 4 C^2 [1 + M^2 delta int_0^delta e^{beta s} alpha(ds)] / (beta - 1)``.

    ``beta`` defaults to ``1/delta``.  When ``beta == 1/delta`` the bound
    ``4 C^2 delta [1 + M^2 delta e alpha] / (1 - delta)`` is also returned.

    Raises
    ------
    DomainError
        If ``beta <= 1``.
    """
    if beta is None:
        if delta <= 0:
            raise DomainError("beta defaults to 1/delta, which needs delta > 0")
        beta = 1.0 / delta
    if beta <= 1:
        raise DomainError(f"weight rate beta={beta} must exceed 1")
    wmass = 0.0 if measure is None else exp_weighted_mass(measure, beta, "advanced")
    Kp = 4.0 * C ** 2 * (1.0 + M ** 2 * delta * wmass) / (beta - 1.0)
    bound = None
    if delta > 0 and math.isclose(beta, 1.0 / delta, rel_tol=1e-12):
        mass = 0.0 if measure is None else measure.total_mass()
        bound = 4.0 * C ** 2 * delta * (1.0 + M ** 2 * delta * math.e * mass) / (1.0 - delta)
    return ASDEConstant(Kp, beta, bound)


def _weights(grid: TimeGrid, beta: float) -> np.ndarray:
    h = grid.dt
    w = np.zeros(grid.n_nodes)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    if beta > 0:
        w *= np.exp(-beta * (grid.nodes - grid.nodes[0]))
    return w


def _advanced_functional(G, A, ensemble, basis, mode, martingale, i_end):
    """``E_i[(A G)_i]`` for every node ``i < i_end``."""
    P, N, k = G.shape
    out = np.zeros((P, N, k))
    if mode == "martingale":
        ratio = (G / martingale).mean(axis=0, keepdims=True)
        out[:] = martingale * apply_matrix(A, ratio)
        return out
    AG = apply_matrix(A, G)
    for i in range(i_end):
        out[:, i, :] = conditional_expectation(AG[:, i, :], i, ensemble, basis)
    return out


def _eval(fn, t, x, adv, P, width):
    return np.asarray(fn(t, x, adv), dtype=float).reshape(P, width)


def picard_solve_asde(
    problem: ASDEProblem,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    basis: RegressionBasis | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    mode: str = "regression",
    martingale: SampledProcess | None = None,
) -> tuple[ASDESolution, PicardReport]:
    """Picard iteration of the frozen-advanced-term Euler-Maruyama map.

    ``mode="regression"`` estimates conditional expectations by regression on
    the basis; ``mode="martingale"`` uses ``E_t[X(s)] = M(t) E[X(s)/M(s)]``
    for a supplied exponential martingale ``M``, exact when ``X = qM`` with
    ``q`` deterministic.  The iterate difference is measured with weight
    ``e^{-s/delta}`` over ``[0, t_end]``.
    """
    if mode not in ("regression", "martingale"):
        raise ValueError(f"unknown mode {mode!r}")
    basis = basis or RegressionBasis()
    if not np.array_equal(grid.nodes, ensemble.grid.nodes):
        raise ConfigurationError("ensemble must be generated on the solve grid")
    i0 = grid.index_of(0.0)
    sub, _ = grid.slice(0.0, grid.t_end)
    ens = ensemble.restrict(0.0, grid.t_end) if i0 > 0 else ensemble
    iT = sub.index_of(problem.T)
    n, d = problem.dims
    P = ens.n_paths
    N = sub.n_nodes
    nodes = sub.nodes
    dt = sub.dt
    dW = ens.increments

    A = problem.window_matrix(sub)
    has_adv = A.nnz > 0
    M = None
    if mode == "martingale":
        if martingale is None:
            raise ConfigurationError("martingale mode needs the exponential martingale M")
        M = martingale.values[:, grid.index_of(0.0):, :] if martingale.grid.n_nodes == grid.n_nodes else martingale.values
        if M.shape[1] != N:
            raise ConfigurationError("martingale must live on the solve grid")

    x0 = np.broadcast_to(np.asarray(problem.x0, dtype=float).reshape(-1, n) if np.ndim(problem.x0) else
                         np.full((1, n), float(problem.x0)), (P, n))
    lam = None
    if iT < N - 1:
        lam = np.asarray(problem.terminal_path(nodes[iT + 1:]), dtype=float).reshape(N - iT - 1, -1)
        lam = np.broadcast_to(lam, (N - iT - 1, n))
        if not np.all(np.isfinite(lam)):
            raise ValueError("terminal path must be finite at every node")

    X = np.empty((P, N, n))
    X[:, :iT + 1, :] = x0[:, None, :]
    if lam is not None:
        X[:, iT + 1:, :] = lam[None]

    K = None
    beta = 1.0 / problem.delay if problem.delay > 0 else 0.0
    if problem.delay > 0 and beta > 1:
        Mb = problem.kernel.bound if problem.kernel is not None else 1.0
        K = asde_contraction_constant(problem.lipschitz_C, Mb, problem.delay, problem.measure).K_prime
        if K >= 1:
            logger.warning("ASDE contraction constant K'=%.4g >= 1 for %s", K, problem.name)
    w = _weights(sub, beta)

    diffs: list[float] = []
    for sweep in range(1, max_iter + 1):
        if has_adv:
            Gb = np.stack([np.asarray(problem.drift_integrand(nodes[j], X[:, j, :]), dtype=float).reshape(P, -1)
                           for j in range(N)], axis=1)
            Gs = np.stack([np.asarray(problem.diffusion_integrand(nodes[j], X[:, j, :]), dtype=float).reshape(P, -1)
                           for j in range(N)], axis=1)
            adv_b = _advanced_functional(Gb, A, ens, basis, mode, M, iT)
            adv_s = _advanced_functional(Gs, A, ens, basis, mode, M, iT)
        else:
            adv_b = adv_s = np.zeros((P, N, n))
        x_new = np.array(X)
        x = np.array(x0)
        x_new[:, 0, :] = x
        for i in range(iT):
            drift = _eval(problem.drift, nodes[i], x, adv_b[:, i, :], P, n)
            diff_c = _eval(problem.diffusion, nodes[i], x, adv_s[:, i, :], P, n * d).reshape(P, n, d)
            x = x + drift * dt[i] + np.einsum("pnk,pk->pn", diff_c, dW[:, i, :])
            x_new[:, i + 1, :] = x
        if lam is not None:
            x_new[:, iT + 1:, :] = lam[None]
        delta_norm = float(np.sqrt(np.mean(np.sum((x_new - X) ** 2, axis=2) @ w)))
        diffs.append(delta_norm)
        X = x_new
        if not has_adv or delta_norm < tol:
            break
    else:
        raise NonConvergenceError(
            f"{problem.name}: no convergence to tol={tol:g} in {max_iter} sweeps (last diff {diffs[-1]:.3e})",
            history=diffs)
    report = PicardReport(len(diffs), diffs, _geometric_ratio(diffs), K)
    return ASDESolution(SampledProcess(sub, X), offset=i0), report


def euler_maruyama(drift: Callable, diffusion: Callable, x0: float, grid: TimeGrid,
                   ensemble: PathEnsemble) -> np.ndarray:
    """Reference Euler-Maruyama for ``dx = b(t,x) dt + s(t,x) dW`` (scalar, d=1)."""
    P = ensemble.n_paths
    out = np.empty((P, grid.n_nodes))
    x = np.full(P, float(x0))
    out[:, 0] = x
    dW = ensemble.increments[:, :, 0]
    for i in range(grid.n_steps):
        t = grid.nodes[i]
        x = x + drift(t, x) * grid.dt[i] + diffusion(t, x) * dW[:, i]
        out[:, i + 1] = x
    return out


# ----------------------------------------------------------------------------
# linear adjoint equations and p = q M


@dataclass(frozen=True)
class LinearAdjointSpec:
    """``dp = (a p - b E_t[p(t+delta)]) dt - (c p + e E_t[p(t+delta)]) dW``, ``p(0) = K``.

    ``p = 0`` on ``(T, T+delta]``.  Any non-zero additive term breaks the
    multiplicative structure the decomposition relies on.
    """

    a: float
    b: float
    c: float
    e: float
    K: float
    delta: float
    T: float
    drift_constant: float = 0.0
    diffusion_constant: float = 0.0

    def check_structure(self) -> None:
        if self.drift_constant != 0 or self.diffusion_constant != 0:
            raise StructureError("decomposition p = qM needs drift and diffusion linear in p "
                                 "(found additive terms)")

    def asde_problem(self, lipschitz_C: float | None = None) -> ASDEProblem:
        a, b, c, e = self.a, self.b, self.c, self.e
        dc, sc = self.drift_constant, self.diffusion_constant
        C = lipschitz_C if lipschitz_C is not None else max(abs(a), abs(b), abs(c), abs(e), 1e-12)
        return ASDEProblem(
            drift=lambda t, x, adv: a * x - b * adv + dc,
            diffusion=lambda t, x, adv: -(c * x + e * adv + sc),
            x0=self.K, T=self.T, delay=self.delta, measure=DelayMeasure.dirac(self.delta),
            lipschitz_C=C, name="linear-adjoint")


def martingale_decomposition_solve(
    spec: LinearAdjointSpec,
    ensemble: PathEnsemble,
    q: "GridFunction | None" = None,
    tol: float = 1e-12,
) -> ASDESolution:
    """``p = q M`` for a linear adjoint equation.

    ``q`` solves ``q' = a q - b q(t+delta)``, ``q(0) = K``, ``q = 0`` after
    ``T`` (computed by Picard iteration on the ensemble grid if not given).
    ``M`` solves ``dM = -g(t) M dW`` with ``g(t) = c + e q(t+delta)/q(t)``;
    Ito's formula then gives exactly the drift and diffusion of ``spec``
    because ``E_t[M(t+delta)] = M(t)``.  Nodes where ``q`` vanishes use
    ``g = c``.
    """
    from .aode import AODEProblem, picard_solve_aode

    spec.check_structure()
    grid = ensemble.grid
    i0 = grid.index_of(0.0)
    sub, _ = grid.slice(0.0, grid.t_end)
    ens = ensemble.restrict(0.0, grid.t_end) if i0 > 0 else ensemble
    if q is None:
        q = picard_solve_aode(AODEProblem(spec.a, -spec.b, spec.delta, spec.K, spec.T), sub, tol=tol)
    qv = q.on(sub)
    iT = sub.index_of(spec.T)
    shift = _shift_index(sub, spec.delta)
    q_adv = np.array([qv[j] if j is not None else 0.0 for j in shift])
    g = np.full(sub.n_steps, float(spec.c))
    ok = np.abs(qv[:-1]) > 1e-300
    g[ok] = spec.c + spec.e * q_adv[:-1][ok] / qv[:-1][ok]
    g[iT:] = spec.c
    degenerate = np.nonzero(~ok[:iT])[0]
    if spec.e == 0:
        M = exponential_martingale(spec.c, ens)
    else:
        M = exponential_martingale(g, ens)
    p = qv[None, :, None] * M.values
    sol = ASDESolution(SampledProcess(sub, p), offset=i0,
                       extras={"q": qv, "M": M, "gamma_t": g, "degenerate_nodes": degenerate})
    return sol


def _shift_index(grid: TimeGrid, delta: float) -> list:
    """Index of ``t_i + delta`` for each node, or ``None`` past the grid end."""
    out = []
    for t in grid.nodes:
        out.append(grid.find(t + delta) if t + delta <= grid.t_end + grid._tol(t + delta) else None)
    return out
