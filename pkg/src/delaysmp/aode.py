"""Time-advanced ODEs, their characteristic exponents and a singular integro-ODE.

Three deterministic problems live here:

* ``q'(t) = a q(t) + b q(t + delta)`` on ``[0, T]`` with ``q(0)`` given and a
  prescribed terminal path on ``(T, T + delta]``;
* the characteristic equation ``h + w e^{h delta} = g`` of its exponential
  ansatz;
* ``p'(t) = beta int_t^T p(s)/s ds``, ``p(0) = p0``, whose inner integral is
  logarithmically singular at 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .calculus import TimeGrid
from .errors import DomainError, MissingTerminalPathError, NonConvergenceError

logger = logging.getLogger(__name__)

Coefficient = Union[float, Callable[[np.ndarray], np.ndarray]]


def _zero_path(t):
    return np.zeros_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class GridFunction:
    """Deterministic function sampled on grid nodes, linear in between."""

    grid: TimeGrid
    values: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.grid.nodes, self.values)

    def on(self, grid: TimeGrid) -> np.ndarray:
        if grid.n_nodes == self.grid.n_nodes and np.array_equal(grid.nodes, self.grid.nodes):
            return np.asarray(self.values)
        a = self.grid.find(grid.t_start)
        if a is not None and a + grid.n_nodes <= self.grid.n_nodes and np.allclose(
                self.grid.nodes[a:a + grid.n_nodes], grid.nodes, rtol=0, atol=1e-12):
            return np.asarray(self.values[a:a + grid.n_nodes])
        return self(grid.nodes)


# ----------------------------------------------------------------------------
# characteristic equation


@dataclass(frozen=True)
class CharacteristicSpec:
    """Parameters of ``h + alpha kappa e^{h delta} = alpha - r``."""

    alpha: float
    r: float
    kappa: float
    delta: float

    def __post_init__(self):
        if self.alpha < 0 or self.kappa < 0 or self.delta < 0:
            raise DomainError("need alpha, kappa, delta >= 0")

    @property
    def growth(self) -> float:
        return self.alpha - self.r

    @property
    def weight(self) -> float:
        return self.alpha * self.kappa

    def F(self, h):
        return h + self.weight * np.exp(np.asarray(h) * self.delta)


def solve_characteristic(growth: float, weight: float, delta: float, tol: float = 1e-12,
                         bisect_tol: float = 1e-8) -> float:
    """Unique root of ``F(h) = h + weight e^{h delta} = growth``.

    Brackets by doubling from ``h0 = growth - weight`` (the ``delta = 0``
    root), bisects to width ``bisect_tol`` and polishes with Newton until
    ``|F(h) - growth| <= tol``.
    """
    if weight < 0 or delta < 0:
        raise DomainError("F is only monotone for weight >= 0 and delta >= 0")
    if weight == 0:
        return float(growth)
    if delta == 0:
        return float(growth - weight)

    def resid(h):
        return h + weight * math.exp(h * delta) - growth

    h0 = growth - weight
    f0 = resid(h0)
    if f0 == 0:
        return h0
    step = max(1.0, abs(h0))
    if f0 > 0:
        hi, lo = h0, h0 - step
        while resid(lo) > 0:
            step *= 2
            lo = h0 - step
    else:
        lo, hi = h0, h0 + step
        while resid(hi) < 0:
            step *= 2
            hi = h0 + step
    while hi - lo > bisect_tol:
        mid = 0.5 * (lo + hi)
        if resid(mid) > 0:
            hi = mid
        else:
            lo = mid
    h = 0.5 * (lo + hi)
    for _ in range(50):
        r = resid(h)
        if abs(r) <= tol:
            break
        h_new = h - r / (1.0 + weight * delta * math.exp(h * delta))
        if not (lo - bisect_tol <= h_new <= hi + bisect_tol):
            h_new = 0.5 * (lo + hi)
        if h_new == h:
            break
        h = h_new
    return float(h)


def characteristic_root(spec: CharacteristicSpec, tol: float = 1e-12) -> float:
    """Root ``h`` of ``h + alpha kappa e^{h delta} = alpha - r``."""
    return solve_characteristic(spec.growth, spec.weight, spec.delta, tol)


def exponential_ansatz(spec: CharacteristicSpec, K: float, T: float, grid: TimeGrid,
                       h: float | None = None) -> GridFunction:
    """``q(t) = K e^{h t}`` on ``[0, T]`` and ``q = 0`` on ``(T, T + delta]``."""
    h = characteristic_root(spec) if h is None else h
    t = grid.nodes
    vals = np.where(t <= T + grid._tol(T), K * np.exp(h * t), 0.0)
    return GridFunction(grid, vals)


# ----------------------------------------------------------------------------
# advanced ODE


@dataclass
class AODEProblem:
    """``q' = a q + b q(t + delta)`` with ``q(0) = q0`` and ``q = terminal_path`` after ``T``."""

    a: Coefficient
    b: Coefficient
    delta: float
    q0: float
    T: float
    terminal_path: Callable = _zero_path

    def __post_init__(self):
        if self.delta < 0:
            raise DomainError("delta must be >= 0")


def _coef(c: Coefficient, t: np.ndarray) -> np.ndarray:
    if callable(c):
        return np.broadcast_to(np.asarray(c(t), dtype=float), np.shape(t))
    return np.full(np.shape(t), float(c))


def _phi1(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-5
    out = np.empty_like(x)
    out[~small] = np.expm1(x[~small]) / x[~small]
    xs = x[small]
    out[small] = 1 + xs / 2 + xs ** 2 / 6
    return out


def _phi2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    out = np.empty_like(x)
    xb = x[~small]
    out[~small] = (np.expm1(xb) - xb) / xb ** 2
    xs = x[small]
    out[small] = 0.5 + xs / 6 + xs ** 2 / 24 + xs ** 3 / 120
    return out


def _shifted(values: np.ndarray, grid: TimeGrid, delta: float) -> np.ndarray:
    """``values(t_i + delta)`` (linear interpolation; ``t_i + delta`` beyond the grid -> 0)."""
    t = grid.nodes + delta
    out = np.interp(t, grid.nodes, values)
    out[t > grid.t_end + grid._tol(grid.t_end)] = 0.0
    return out


def _solve_grid(grid: TimeGrid) -> TimeGrid:
    if grid.t_start < -grid._tol(0.0):
        sub, _ = grid.slice(0.0, grid.t_end)
        return sub
    return grid


def picard_solve_aode(problem: AODEProblem, grid: TimeGrid, tol: float = 1e-12,
                      max_iter: int = 200, history: Optional[list] = None) -> GridFunction:
    """Fixed point of ``q -> solution of q' = a q + b q_prev(t+delta)``.

    Each sweep integrates the linear ODE exactly on every cell with the frozen
    advanced term interpolated linearly between nodes:
    ``q_{i+1} = e^{a h} q_i + h phi1(a h) g_i + h phi2(a h) (g_{i+1} - g_i)``.

    Raises
    ------
    NonConvergenceError
        If the sup-norm change stays above ``tol`` after ``max_iter`` sweeps.
    """
    grid = _solve_grid(grid)
    iT = grid.index_of(problem.T)
    t = grid.nodes
    if problem.delta > 0 and grid.t_end < problem.T + problem.delta - grid._tol(problem.T + problem.delta):
        raise MissingTerminalPathError("grid must extend to T + delta")
    lam = np.asarray(problem.terminal_path(t[iT + 1:]), dtype=float).reshape(-1)
    if not np.all(np.isfinite(lam)):
        raise ValueError("terminal path must be finite")
    h = grid.dt[:iT]
    a_mid = _coef(problem.a, 0.5 * (t[:iT] + t[1:iT + 1]))
    b_nodes = _coef(problem.b, t[:iT + 1])
    E = np.exp(a_mid * h)
    c1 = h * _phi1(a_mid * h)
    c2 = h * _phi2(a_mid * h)

    q = np.empty(grid.n_nodes)
    q[:iT + 1] = problem.q0
    q[iT + 1:] = lam
    diffs = [] if history is None else history
    for _ in range(max_iter):
        g = b_nodes * _shifted(q, grid, problem.delta)[:iT + 1]
        q_new = np.array(q)
        qi = float(problem.q0)
        q_new[0] = qi
        inc = c1 * g[:-1] + c2 * (g[1:] - g[:-1])
        for i in range(iT):
            qi = E[i] * qi + inc[i]
            q_new[i + 1] = qi
        d = float(np.max(np.abs(q_new - q)))
        diffs.append(d)
        q = q_new
        if d < tol or (problem.delta == 0 and len(diffs) > 1):
            break
    else:
        raise NonConvergenceError(f"AODE Picard did not reach tol={tol:g} in {max_iter} sweeps", history=diffs)
    return GridFunction(grid, q)


@dataclass
class AODEResidual:
    residual: np.ndarray
    nodes: np.ndarray
    max_abs: float
    max_abs_interior: float
    max_abs_layer: float
    min_abs_layer: float

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("max_abs", "max_abs_interior", "max_abs_layer", "min_abs_layer")}


def aode_residual(q: GridFunction, problem: AODEProblem, grid: TimeGrid) -> AODEResidual:
    """Central-difference residual ``q'(t_i) - a q(t_i) - b q(t_i + delta)``.

    Evaluated at interior nodes of ``[0, T]``; maxima are split between
    ``[0, T - delta]`` and the terminal layer ``(T - delta, T)``.
    """
    grid = _solve_grid(grid)
    vals = q.on(grid)
    t = grid.nodes
    iT = grid.index_of(problem.T)
    idx = np.arange(1, iT)
    dq = (vals[idx + 1] - vals[idx - 1]) / (t[idx + 1] - t[idx - 1])
    adv = _shifted(vals, grid, problem.delta)[idx]
    r = dq - _coef(problem.a, t[idx]) * vals[idx] - _coef(problem.b, t[idx]) * adv
    cut = problem.T - problem.delta + grid._tol(problem.T)
    inner = t[idx] <= cut
    layer = ~inner
    absr = np.abs(r)
    return AODEResidual(
        residual=r, nodes=t[idx],
        max_abs=float(absr.max()) if absr.size else 0.0,
        max_abs_interior=float(absr[inner].max()) if inner.any() else 0.0,
        max_abs_layer=float(absr[layer].max()) if layer.any() else 0.0,
        min_abs_layer=float(absr[layer].min()) if layer.any() else 0.0,
    )


# ----------------------------------------------------------------------------
# coupled system for the linear-quadratic application


@dataclass
class CoupledAODEResult:
    h: float
    gamma: float
    q_ansatz: GridFunction
    q_picard: GridFunction
    gamma_profile: np.ndarray
    degenerate: np.ndarray
    deviation: np.ndarray

    def layer_deviation(self, T: float, delta: float) -> float:
        t = self.q_picard.grid.nodes[: self.gamma_profile.size]
        m = (t > T - delta) & ~self.degenerate
        return float(np.max(np.abs(self.deviation[m]))) if m.any() else 0.0


def coupled_aode_solve(beta1: float, beta2: float, gamma1: float, gamma2: float, K: float,
                       delta: float, T: float, grid: TimeGrid, tol: float = 1e-12,
                       threshold: float = 1e-12) -> CoupledAODEResult:
    """Solve ``q' = -beta1 q - beta2 q(t+delta)`` and ``gamma q = gamma1 q + gamma2 q(t+delta)``.

    The constant ``gamma = gamma1 + gamma2 e^{h delta}`` comes from the ansatz
    ``q = K e^{h t}``; the nodewise ``gamma(t) = gamma1 + gamma2 q(t+delta)/q(t)``
    uses the Picard solution and is only evaluated where ``|q| > threshold``.
    """
    grid = _solve_grid(grid)
    h = solve_characteristic(-beta1, beta2, delta, tol)
    gamma = gamma1 + gamma2 * math.exp(h * delta)
    t = grid.nodes
    iT = grid.index_of(T)
    q_ans = GridFunction(grid, np.where(t <= T + grid._tol(T), K * np.exp(h * t), 0.0))
    q_pic = picard_solve_aode(AODEProblem(-beta1, -beta2, delta, K, T), grid, tol=tol)
    qv = q_pic.values[: iT + 1]
    q_adv = _shifted(q_pic.values, grid, delta)[: iT + 1]
    degenerate = np.abs(qv) <= threshold
    profile = np.full(iT + 1, np.nan)
    profile[~degenerate] = gamma1 + gamma2 * q_adv[~degenerate] / qv[~degenerate]
    return CoupledAODEResult(h, gamma, q_ans, q_pic, profile, degenerate, profile - gamma)


# ----------------------------------------------------------------------------
# integro-ODE  p'(t) = beta int_t^T p(s)/s ds


@dataclass
class IntegroODEProblem:
    beta: float
    T: float
    p0: float = 1.0
    eps: Optional[float] = None
    growth: float = 1.01

    def __post_init__(self):
        if self.beta < 0:
            raise DomainError("beta must be >= 0")
        if self.eps is None:
            self.eps = 1e-6 * self.T
        if not (0 < self.eps < self.T):
            raise DomainError("need 0 < eps < T")

    def grid(self) -> TimeGrid:
        return TimeGrid.graded(self.T, self.eps, self.growth)


@dataclass
class IntegroODESolution:
    p: GridFunction
    pdot: np.ndarray
    n_iterations: int
    history: list = field(default_factory=list)

    @property
    def grid(self) -> TimeGrid:
        return self.p.grid


def _inner_tail(u: np.ndarray, p: np.ndarray):
    """Per-cell slopes/intercepts and ``G_k = int_{u_k}^T p(s)/s ds`` for k >= 1."""
    h = np.diff(u)
    m = np.diff(p) / h
    c = p[:-1] - m * u[:-1]
    I = np.empty(h.size)
    I[0] = np.inf
    I[1:] = c[1:] * np.log1p(h[1:] / u[1:-1]) + m[1:] * h[1:]
    G = np.zeros(u.size)
    G[1:-1] = np.cumsum(I[1:][::-1])[::-1]
    G[0] = np.inf
    return h, m, c, G


def integro_ode_solve(problem: IntegroODEProblem, tol: float = 1e-14, max_iter: int = 200,
                      grid: TimeGrid | None = None) -> IntegroODESolution:
    """Picard iteration on ``p(t) = p0 + int_0^t beta G(s) ds``, ``G(s) = int_s^T p(u)/u du``.

    With ``p`` piecewise linear on the graded mesh, both integrals are done in
    closed form per cell (the ``1/u`` and ``log`` singularities at 0 are
    integrated analytically), so the only approximation is the piecewise
    linear representation of ``p``.
    """
    grid = grid or problem.grid()
    u = grid.nodes
    if u[0] != 0.0:
        raise ValueError("integro-ODE grid must start at 0")
    beta = problem.beta
    p = np.full(u.size, float(problem.p0))
    diffs = []
    for it in range(1, max_iter + 1):
        h, m, c, G = _inner_tail(u, p)
        # int over cell k of G(s) ds; the u_k log term vanishes for u_0 = 0
        lg = np.zeros(h.size)
        lg[1:] = u[1:-1] * np.log1p(h[1:] / u[1:-1])
        cell = h * G[1:] + c * (h - lg) + m * h ** 2 / 2
        p_new = np.empty_like(p)
        p_new[0] = problem.p0
        p_new[1:] = problem.p0 + beta * np.cumsum(cell)
        d = float(np.max(np.abs(p_new - p)))
        diffs.append(d)
        p = p_new
        if d < tol or beta == 0:
            break
    else:
        raise NonConvergenceError(f"integro-ODE did not reach tol={tol:g}", history=diffs)
    _, _, _, G = _inner_tail(u, p)
    pdot = beta * G if beta != 0 else np.zeros_like(p)
    if np.any(p <= 0):
        raise DomainError("integro-ODE solution is not positive")
    return IntegroODESolution(GridFunction(grid, p), pdot, len(diffs), diffs)


def integro_residual(sol: IntegroODESolution, beta: float, eps: float, scaled: bool = True) -> np.ndarray:
    """Finite-difference residual of ``p'' = -(beta/t) p`` at interior nodes ``t >= eps``.

    Uses the three-point second difference on the non-uniform mesh.  With
    ``scaled`` the identity is multiplied through by ``t`` (``t p'' + beta p``),
    which removes the ``1/t`` growth of the truncation error near 0.
    """
    t = sol.grid.nodes
    p = sol.p.values
    hm = t[1:-1] - t[:-2]
    hp = t[2:] - t[1:-1]
    d2 = 2.0 * ((p[2:] - p[1:-1]) / hp - (p[1:-1] - p[:-2]) / hm) / (hp + hm)
    tc = t[1:-1]
    keep = tc >= eps * (1 - 1e-12)
    r = tc * d2 + beta * p[1:-1] if scaled else d2 + beta * p[1:-1] / tc
    return r[keep]


def _central_diff(t: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Second-order three-point first derivative at interior nodes of a non-uniform mesh."""
    hm = t[1:-1] - t[:-2]
    hp = t[2:] - t[1:-1]
    return (hm ** 2 * f[2:] - hp ** 2 * f[:-2] + (hp ** 2 - hm ** 2) * f[1:-1]) / (hm * hp * (hm + hp))


def integro_derivative_residuals(sol: IntegroODESolution, beta: float, eps: float) -> dict:
    """Finite-difference checks of ``p'' = -(beta/t) p`` on ``[eps, T]`` through ``pdot``.

    ``second``: max of ``|D pdot + beta p / t|`` with ``D`` the three-point
    difference; ``first``: max of ``|D p - pdot|``, tying ``pdot`` back to
    ``p``; ``stencil``: the unscaled second difference of ``p`` itself (see
    :func:`integro_residual`), whose rounding error grows like ``1/h^2``.
    """
    t = sol.grid.nodes
    p = sol.p.values
    keep = t[1:-1] >= eps * (1 - 1e-12)
    second = _central_diff(t, sol.pdot) + beta * p[1:-1] / t[1:-1]
    first = _central_diff(t, p) - sol.pdot[1:-1]
    stencil = integro_residual(sol, beta, eps, scaled=False)
    return {"second": float(np.abs(second[keep]).max()), "first": float(np.abs(first[keep]).max()),
            "stencil": float(np.abs(stencil).max())}
