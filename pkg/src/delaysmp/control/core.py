"""Hamiltonians, adjoint construction, maximum conditions and objective evaluation.

Sign conventions: problems are stored with the objective exactly as stated
(``sense`` says whether it is maximised or minimised).  The Hamiltonian is
always built for maximisation, ``H = l - <f, p>`` with ``l = sign * l_obj``
and initial cost ``sign * gamma_obj`` (``sign = -1`` for minimisation), so the
adjoint starts at ``p(0) = -sign * gamma_obj'(y(0))``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..asde import ASDEProblem, picard_solve_asde
from ..bsde import BSDESolution, DelayedBSDEProblem, solve_controlled
from ..calculus import (
    DelayKernel,
    DelayMeasure,
    MeasureKind,
    SampledProcess,
    TimeGrid,
    aggregation_matrix,
    apply_matrix,
)
from ..errors import ConfigurationError
from ..montecarlo import PathEnsemble, RegressionBasis, conditional_expectation

logger = logging.getLogger(__name__)

ARGS = ("y", "yd", "z", "zd", "v", "vd")


def _zero_path(t):
    return np.zeros_like(np.asarray(t, dtype=float))


@dataclass
class HamiltonianSpec:
    """``H(t, y, yd, z, zd, v, vd, p) = l(...) - <f(...), p>`` with analytic partials.

    ``running`` and ``generator`` take ``(t, y, yd, z, zd, v, vd)``; each entry
    of ``partials`` takes the same arguments plus ``p``.  ``domain`` gives the
    sampling box per argument (and for ``t`` and ``p``) used by
    :meth:`check_partials`.
    """

    running: Callable
    generator: Callable
    partials: dict
    domain: dict = field(default_factory=dict)

    def __call__(self, t, y, yd, z, zd, v, vd, p):
        f = np.asarray(self.generator(t, y, yd, z, zd, v, vd), dtype=float)
        lval = np.asarray(self.running(t, y, yd, z, zd, v, vd), dtype=float)
        fp = f * p
        if fp.ndim >= 2:
            fp = fp.sum(axis=-1)
        if lval.ndim >= 2:
            lval = lval.reshape(lval.shape[0], -1).sum(axis=-1)
        return lval - fp

    def partial(self, name: str, t, y, yd, z, zd, v, vd, p):
        fn = self.partials.get(name)
        if fn is None:
            return np.zeros_like(np.asarray({"y": y, "yd": yd, "z": z, "zd": zd, "v": v, "vd": vd}[name],
                                            dtype=float))
        return np.asarray(fn(t, y, yd, z, zd, v, vd, p), dtype=float)

    def sample_points(self, n: int, rng: np.random.Generator) -> dict:
        keys = ("t",) + ARGS + ("p",)
        out = {}
        for k in keys:
            lo, hi = self.domain.get(k, (-1.0, 1.0) if k != "t" else (0.0, 1.0))
            out[k] = rng.uniform(lo, hi, n)
        return out

    def check_partials(self, n_points: int = 100, seed: int = 0, rel_tol: float = 1e-5,
                       step: float = 1e-3) -> dict:
        """Compare analytic partials with Richardson-extrapolated central differences.

        Returns ``{name: max relative error}``; an arg on which ``H`` does not
        depend has both derivatives equal to 0 and error 0.
        """
        rng = np.random.default_rng(seed)
        pts = self.sample_points(n_points, rng)
        errors = {}
        for name in ARGS:
            x = pts[name]
            hstep = step * np.maximum(1.0, np.abs(x))

            def H_at(shift):
                a = dict(pts)
                a[name] = x + shift
                return self(a["t"], a["y"], a["yd"], a["z"], a["zd"], a["v"], a["vd"], a["p"])

            d1 = (H_at(hstep) - H_at(-hstep)) / (2 * hstep)
            d2 = (H_at(hstep / 2) - H_at(-hstep / 2)) / hstep
            fd = (4 * d2 - d1) / 3
            an = self.partial(name, pts["t"], pts["y"], pts["yd"], pts["z"], pts["zd"], pts["v"], pts["vd"],
                              pts["p"])
            an = np.broadcast_to(an, fd.shape)
            scale = np.maximum(np.abs(an), np.abs(fd))
            err = np.where(scale > 0, np.abs(an - fd) / np.where(scale > 0, scale, 1.0), 0.0)
            errors[name] = float(err.max())
        return errors


@dataclass
class ControlProblem:
    """A controlled delayed BSDE with objective ``E int l_obj dt + gamma_obj(y(0))``."""

    name: str
    hamiltonian: HamiltonianSpec
    objective_running: Callable
    initial_cost: Callable
    initial_cost_derivative: Callable
    sense: str
    terminal: Callable[[PathEnsemble], np.ndarray]
    T: float
    delay: float = 0.0
    measure: Optional[DelayMeasure] = None
    kernel: Optional[DelayKernel] = None
    aggregator: Optional[Callable[[TimeGrid], sp.spmatrix]] = None
    initial_y: Callable = _zero_path
    initial_z: Callable = _zero_path
    eta: Callable = _zero_path
    admissible: tuple = (-math.inf, math.inf)
    lipschitz_C: float = 1.0
    control_delay: bool = False

    def __post_init__(self):
        if self.sense not in ("maximize", "minimize"):
            raise ConfigurationError(f"sense must be 'maximize' or 'minimize', got {self.sense!r}")

    @property
    def sign(self) -> float:
        return 1.0 if self.sense == "maximize" else -1.0

    def bsde_problem(self) -> DelayedBSDEProblem:
        return DelayedBSDEProblem(
            generator=self.hamiltonian.generator, terminal=self.terminal, T=self.T, delay=self.delay,
            measure=self.measure, kernel=self.kernel, initial_y=self.initial_y, initial_z=self.initial_z,
            lipschitz_C=self.lipschitz_C, aggregator=self.aggregator, name=self.name)

    def project(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self.admissible
        return np.clip(values, lo, hi)

    def delay_matrix(self, grid: TimeGrid) -> sp.csr_matrix:
        return self.bsde_problem().delay_matrix(grid)

    def advanced_matrix(self, grid: TimeGrid) -> sp.csr_matrix:
        """Operator taking an integrand on ``[0, T]`` to its advanced window integral.

        Measure-based problems use ``int_t^{t+delta} G(s) phi(s,t) chi_[0,T](s)
        alpha(ds)`` (a single shifted evaluation for Dirac measures).  Problems
        given by an explicit delay matrix ``A`` use its time-weighted
        transpose ``W^{-1} A^T W`` (left-point weights ``W``), the exact
        discrete dual.
        """
        i0, iT = grid.index_of(0.0), grid.index_of(self.T)
        if self.aggregator is not None:
            A = sp.csr_matrix(self.aggregator(grid))
            w = np.zeros(grid.n_nodes)
            w[i0:iT] = grid.dt[i0:iT]
            inv = np.zeros_like(w)
            inv[w > 0] = 1.0 / w[w > 0]
            return (sp.diags(inv) @ A.T @ sp.diags(w)).tocsr()
        if self.measure is None:
            return sp.csr_matrix((grid.n_nodes, grid.n_nodes))
        kernel = (self.kernel or DelayKernel.constant(1.0)).transposed()
        return aggregation_matrix(grid, self.measure, kernel, "advanced", rows=range(i0, iT + 1), embed=True,
                                  mask_after=self.T)


def _node_lookup(grid: TimeGrid):
    cache = {}

    def idx(t):
        key = float(t)
        if key not in cache:
            cache[key] = grid.find(key)
        return cache[key]
    return idx


def _state_at(solution: BSDESolution, i: int):
    ex = solution.extras
    return (solution.y.values[:, i, :], ex["yd"][:, i, :], solution.z.values[:, i, :], ex["zd"][:, i, :],
            ex["v"][:, i, :], ex["vd"][:, i, :])


def solve_state(problem: ControlProblem, control: SampledProcess, grid: TimeGrid, ensemble: PathEnsemble,
                basis: RegressionBasis | None = None, tol: float = 1e-8, max_iter: int = 60):
    return solve_controlled(problem.bsde_problem(), control, grid, ensemble, basis, tol, max_iter,
                            eta=problem.eta)


def build_adjoint(problem: ControlProblem, control: SampledProcess, solution: BSDESolution,
                  adjoint_grid: TimeGrid | None = None) -> ASDEProblem:
    """Adjoint ASDE of the control problem along a solved state.

    ``dp = (-H_y - adv[H_yd]) dt + (-H_z - adv[H_zd]) dW`` with
    ``p(0) = -gamma_H'(y(0))`` evaluated at the cross-path mean of ``y(0)``,
    and ``p = 0`` on ``(T, T+delta]``.  ``adjoint_grid`` (default: the state
    grid extended to ``T + delta`` when needed) must contain the state grid's
    nodes on ``[0, T]``.
    """
    H = problem.hamiltonian
    sgrid = solution.grid
    y0 = solution.y0_mean()
    p0 = -problem.sign * np.asarray(problem.initial_cost_derivative(y0), dtype=float)
    lookup = _node_lookup(sgrid)
    P = solution.y.n_paths
    dim_y = solution.y.dim

    def at(t):
        i = lookup(t)
        if i is None or sgrid.nodes[i] > problem.T + sgrid._tol(problem.T):
            return None
        return _state_at(solution, i)

    def part(name, t, p):
        st = at(t)
        if st is None:
            return np.zeros((P, dim_y))
        return np.broadcast_to(H.partial(name, t, *st, p), (P, dim_y))

    def drift(t, p, adv):
        return -part("y", t, p) - adv

    def diffusion(t, p, adv):
        return -part("z", t, p) - adv

    def drift_integrand(t, p):
        return part("yd", t, p)

    def diffusion_integrand(t, p):
        return part("zd", t, p)

    if problem.aggregator is not None:
        builder = problem.advanced_matrix
        measure = None
    else:
        builder = None
        measure = problem.measure
    if measure is not None and measure.kind is not MeasureKind.DIRAC:
        logger.debug("%s: density-form adjoint for %s measure", problem.name, measure.kind.value)
    return ASDEProblem(
        drift=drift, diffusion=diffusion, x0=p0, T=problem.T, delay=problem.delay, measure=measure,
        kernel=(problem.kernel.transposed() if problem.kernel is not None else None),
        lipschitz_C=problem.lipschitz_C, drift_integrand=drift_integrand,
        diffusion_integrand=diffusion_integrand, horizon_indicator=True, advanced_matrix=builder,
        name=f"{problem.name}-adjoint")


def solve_adjoint(problem: ControlProblem, control: SampledProcess, solution: BSDESolution,
                  grid: TimeGrid, ensemble: PathEnsemble, basis: RegressionBasis | None = None,
                  tol: float = 1e-8, max_iter: int = 60, **kw):
    adj = build_adjoint(problem, control, solution)
    return picard_solve_asde(adj, grid, ensemble, basis, tol, max_iter, **kw)


def _on_grid(values: np.ndarray, src: TimeGrid, dst: TimeGrid) -> np.ndarray:
    """Restrict/embed ``(P, n_src, k)`` values onto ``dst`` by matching node times."""
    out = np.zeros((values.shape[0], dst.n_nodes, values.shape[2]))
    for j, t in enumerate(dst.nodes):
        i = src.find(float(t))
        if i is not None:
            out[:, j, :] = values[:, i, :]
    return out


def maximum_condition_residual(problem: ControlProblem, control: SampledProcess, solution: BSDESolution,
                               p: SampledProcess, mode: str = "stationarity",
                               ensemble: PathEnsemble | None = None, basis: RegressionBasis | None = None,
                               v_grid: Sequence[float] | None = None) -> np.ndarray:
    """Per-node defect of the maximum condition on ``[0, T)``.

    ``stationarity``: path average of ``|H_v + E_t[adv H_vd]|``.
    ``maximum``: for each node the largest ``H(v) - H(u)`` over ``v_grid``
    and all paths (non-positive when ``u`` maximises ``H``).
    """
    H = problem.hamiltonian
    grid = solution.grid
    i0, iT = grid.index_of(0.0), grid.index_of(problem.T)
    pv = _on_grid(p.values, p.grid, grid)
    out = np.zeros(iT - i0)
    if mode == "stationarity":
        adv = np.zeros_like(pv)
        if problem.control_delay:
            G = np.stack([H.partial("vd", grid.nodes[i], *_state_at(solution, i), pv[:, i, :])
                          if i0 <= i <= iT else np.zeros_like(pv[:, 0, :]) for i in range(grid.n_nodes)], axis=1)
            AG = apply_matrix(problem.advanced_matrix(grid), G)
            basis = basis or RegressionBasis()
            for i in range(i0, iT):
                adv[:, i, :] = (conditional_expectation(AG[:, i, :], i, ensemble, basis)
                                if ensemble is not None else AG[:, i, :])
        for k, i in enumerate(range(i0, iT)):
            hv = H.partial("v", grid.nodes[i], *_state_at(solution, i), pv[:, i, :])
            out[k] = float(np.mean(np.abs(hv + adv[:, i, :])))
        return out
    if mode == "maximum":
        if problem.control_delay:
            raise ConfigurationError("the pointwise maximum condition applies only without control delay")
        vs = np.asarray(v_grid if v_grid is not None else np.linspace(-2, 2, 41))
        for k, i in enumerate(range(i0, iT)):
            y, yd, z, zd, u, ud = _state_at(solution, i)
            t = grid.nodes[i]
            Hu = H(t, y, yd, z, zd, u, ud, pv[:, i, :])
            best = -np.inf
            for v in vs:
                vv = problem.project(np.full_like(u, v))
                best = max(best, float(np.max(H(t, y, yd, z, zd, vv, ud, pv[:, i, :]) - Hu)))
            out[k] = best
        return out
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class ObjectiveEstimate:
    J: float
    se: float
    pathwise: np.ndarray
    solution: BSDESolution
    picard_iterations: int


def objective_functional(problem: ControlProblem, control: SampledProcess, grid: TimeGrid,
                         ensemble: PathEnsemble, basis: RegressionBasis | None = None,
                         tol: float = 1e-8, max_iter: int = 60) -> ObjectiveEstimate:
    """``J = E[sum l_obj dt] + gamma_obj(mean y(0))`` with its standard error.

    The running cost uses left-point sums, as in the state scheme.  The SE is
    that of the pathwise values ``sum l dt + gamma(ybar0) + gamma'(ybar0)
    (Y0_path - ybar0)``, where ``Y0_path = xi + sum f dt`` is the per-path
    quantity whose mean is ``ybar0``.
    """
    sol, rep = solve_state(problem, control, grid, ensemble, basis, tol, max_iter)
    i0, iT = sol.i0, grid.index_of(problem.T)
    P = ensemble.n_paths
    run = np.zeros(P)
    for i in range(i0, iT):
        lv = np.asarray(problem.objective_running(grid.nodes[i], *_state_at(sol, i)), dtype=float).reshape(P, -1)
        run += lv.sum(axis=1) * grid.dt[i]
    y0 = sol.y0_mean()
    g0 = float(np.sum(problem.initial_cost(y0)))
    gy = np.asarray(problem.initial_cost_derivative(y0), dtype=float).reshape(-1)
    y0_path = sol.y0_pathwise()
    pathwise = run + g0 + (y0_path - y0) @ gy
    J = float(run.mean() + g0)
    se = float(pathwise.std(ddof=1) / math.sqrt(P)) if P > 1 else 0.0
    return ObjectiveEstimate(J, se, pathwise, sol, rep.n_iterations)


# ----------------------------------------------------------------------------
# optimality verification


@dataclass
class OptimalityReport:
    J_candidate: tuple
    J_perturbed: list
    violations: int
    max_condition_residual: float
    sense: str
    paired_se: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "J_candidate": {"estimate": self.J_candidate[0], "se": self.J_candidate[1]},
            "J_perturbed": [
                {"id": pid, "family": fam, "magnitude": rho, "estimate": J, "se": se, "paired_diff_se": pse}
                for (pid, fam, rho, J, se), pse in zip(self.J_perturbed, self.paired_se)
            ],
            "violations": self.violations,
            "max_condition_residual": self.max_condition_residual,
            "sense": self.sense,
        }


PERTURBATION_FAMILIES = ("deterministic", "adapted", "delayed")


def perturbation_direction(kind: str, k: int, rng: np.random.Generator, grid: TimeGrid,
                           ensemble: PathEnsemble, T: float, delta: float) -> np.ndarray:
    """Perturbation direction ``d`` of shape ``(P, n_nodes, 1)``, zero before 0.

    ``deterministic``: ``sin(2 pi m t/T + phase)``; ``adapted``: a random sign
    times ``W(t)`` or ``tanh(W(t))``; ``delayed``: the same functionals
    shifted by the delay, ``W(t - delta)`` or a bump ``exp(-((t-delta-c)/w)^2)``.
    """
    t = grid.nodes
    P = ensemble.n_paths
    on = (t >= -grid._tol(0.0)) & (t <= T + grid._tol(T))
    W = ensemble.cumulative[:, :, 0]
    if kind == "deterministic":
        m = 1 + k % 3
        phase = rng.uniform(0, 2 * np.pi)
        d = np.broadcast_to(np.sin(2 * np.pi * m * t / T + phase), (P, t.size))
    elif kind == "adapted":
        s = rng.choice([-1.0, 1.0])
        d = s * (W if k % 2 == 0 else np.tanh(W))
    elif kind == "delayed":
        lag = delta if delta > 0 else 0.1 * T
        shift = np.searchsorted(t, t - lag - grid._tol(T))
        valid = t - lag >= -grid._tol(0.0)
        if k % 2 == 0:
            Wd = np.where(valid[None, :], W[:, np.clip(shift, 0, t.size - 1)], 0.0)
            d = rng.choice([-1.0, 1.0]) * Wd
        else:
            c = rng.uniform(0.2, 0.8) * T
            w = 0.15 * T
            d = np.broadcast_to(np.exp(-((t - lag - c) / w) ** 2) * valid, (P, t.size))
    else:
        raise ValueError(f"unknown perturbation family {kind!r}")
    return (np.asarray(d) * on[None, :])[:, :, None]


def verify_optimality(problem: ControlProblem, candidate: SampledProcess, grid: TimeGrid,
                      ensemble: PathEnsemble, n_perturbations: int = 50,
                      magnitudes: Sequence[float] = (0.02, 0.1, 0.5), seed: int = 0,
                      basis: RegressionBasis | None = None, tol: float = 1e-8,
                      max_condition_residual: float = float("nan"),
                      candidate_estimate: ObjectiveEstimate | None = None) -> OptimalityReport:
    """Compare ``J(candidate)`` with ``J`` of admissible perturbations on common random numbers.

    Perturbation ``k`` uses family ``k mod 3`` and magnitude
    ``magnitudes[(k // 3) mod len]``; the control is projected onto the
    admissible box.  A violation is a perturbed ``J`` better than the
    candidate by more than twice ``sqrt(SE_u^2 + SE_v^2)``.
    """
    basis = basis or RegressionBasis()
    base = candidate_estimate or objective_functional(problem, candidate, grid, ensemble, basis, tol)
    full_u = base.solution.extras["v"]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    results = []
    paired = []
    violations = 0
    i0 = grid.index_of(0.0)
    for k in range(n_perturbations):
        fam = PERTURBATION_FAMILIES[k % len(PERTURBATION_FAMILIES)]
        rho = float(magnitudes[(k // len(PERTURBATION_FAMILIES)) % len(magnitudes)])
        d = perturbation_direction(fam, k // len(PERTURBATION_FAMILIES), rng, grid, ensemble, problem.T,
                                   problem.delay)
        v = np.array(full_u)
        v[:, i0:, :] = problem.project(full_u[:, i0:, :] + rho * d[:, i0:, :])
        est = objective_functional(problem, SampledProcess(grid, v), grid, ensemble, basis, tol)
        comb = math.sqrt(base.se ** 2 + est.se ** 2)
        gain = problem.sign * (est.J - base.J)
        if gain > 2 * comb:
            violations += 1
            logger.warning("%s: perturbation %d (%s, rho=%g) beats the candidate by %.3e (2SE=%.3e)",
                           problem.name, k, fam, rho, gain, 2 * comb)
        pse = float(np.std(est.pathwise - base.pathwise, ddof=1) / math.sqrt(len(base.pathwise)))
        results.append((k, fam, rho, est.J, est.se))
        paired.append(pse)
    return OptimalityReport((base.J, base.se), results, violations, float(max_condition_residual),
                            problem.sense, paired)


# ----------------------------------------------------------------------------
# duality identity


def time_weights(grid: TimeGrid, T: float) -> np.ndarray:
    """Left-point quadrature weights on ``[0, T)`` (zero elsewhere)."""
    w = np.zeros(grid.n_nodes)
    i0, iT = grid.index_of(0.0), grid.index_of(T)
    w[i0:iT] = grid.dt[i0:iT]
    return w


@dataclass
class FubiniResult:
    lhs: float
    rhs: float
    defect: float


def fubini_duality_check(H_vd: np.ndarray, u: np.ndarray, v: np.ndarray, measure: DelayMeasure,
                         kernel: DelayKernel | None, grid: TimeGrid, T: float,
                         matrix: sp.spmatrix | None = None) -> FubiniResult:
    """Both sides of the discrete swap behind the duality of delayed and advanced terms.

    ``lhs = E sum_i w_i <H_i, (A (v-u))_i>`` and
    ``rhs = E sum_j <(A^T (w H))_j, (v-u)_j>`` where ``A`` holds the delayed
    window weights and ``w`` the left-point weights on ``[0, T)``; ``A^T``
    applied to ``wH`` is the advanced window integral weighted back by ``w``.
    """
    H_vd = np.asarray(H_vd, dtype=float)
    D = np.asarray(v, dtype=float) - np.asarray(u, dtype=float)
    if H_vd.ndim == 2:
        H_vd = H_vd[:, :, None]
    if D.ndim == 2:
        D = D[:, :, None]
    if matrix is None:
        rows = range(grid.index_of(0.0), grid.index_of(T) + 1)
        matrix = aggregation_matrix(grid, measure, kernel, "delayed", rows=rows, embed=True)
    A = sp.csr_matrix(matrix)
    w = time_weights(grid, T)
    wH = H_vd * w[None, :, None]
    lhs = float(np.mean(np.sum(wH * apply_matrix(A, D), axis=(1, 2))))
    rhs = float(np.mean(np.sum(apply_matrix(A.T.tocsr(), wH) * D, axis=(1, 2))))
    return FubiniResult(lhs, rhs, abs(lhs - rhs))
