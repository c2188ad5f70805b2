"""The three worked control problems: recursive utility with a moving average,
a pension fund with delayed surplus and a linear-quadratic delayed problem."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..aode import (
    AODEProblem,
    CharacteristicSpec,
    GridFunction,
    IntegroODEProblem,
    characteristic_root,
    coupled_aode_solve,
    exponential_ansatz,
    integro_ode_solve,
    picard_solve_aode,
)
from ..asde import LinearAdjointSpec, martingale_decomposition_solve, picard_solve_asde
from ..calculus import DelayMeasure, SampledProcess, TimeGrid, running_average_matrix
from ..errors import DomainError
from ..montecarlo import PathEnsemble, RegressionBasis, generate_brownian
from .core import (
    ControlProblem,
    HamiltonianSpec,
    ObjectiveEstimate,
    OptimalityReport,
    build_adjoint,
    maximum_condition_residual,
    objective_functional,
    verify_optimality,
)

logger = logging.getLogger(__name__)


@dataclass
class Numerics:
    dt: float = 5e-3
    n_paths: int = 10_000
    seed: int = 0
    degree: int = 3
    tol: float = 1e-8
    n_perturbations: int = 50
    magnitudes: tuple = (0.02, 0.1, 0.5)
    verify: bool = True


def _terminal(spec: str | float) -> Callable[[PathEnsemble], np.ndarray]:
    """``"W"`` gives ``xi = W(T)``; a number gives a constant terminal value."""
    if isinstance(spec, str) and spec.strip().upper() in ("W", "W(T)"):
        return lambda ens: ens.W(ens.grid.n_nodes - 1)[:, :1].copy()
    c = float(spec)
    return lambda ens: np.full((ens.n_paths, 1), c)


def _path_summary(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = values.reshape(values.shape[0], values.shape[1])
    P = v.shape[0]
    se = v.std(axis=0, ddof=1) / math.sqrt(P) if P > 1 else np.zeros(v.shape[1])
    return v.mean(axis=0), se


@dataclass
class ApplicationResult:
    """Common output of the application solvers.

    ``scalars`` holds report values; ``tables`` maps CSV names to
    ``(columns, rows)``.
    """

    name: str
    control: SampledProcess
    objective: ObjectiveEstimate
    residual: np.ndarray
    report: OptimalityReport | None
    scalars: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = dict(self.scalars)
        out["J"] = {"estimate": self.objective.J, "se": self.objective.se}
        out["max_condition_residual"] = float(np.max(self.residual)) if self.residual.size else 0.0
        if self.report is not None:
            out["optimality"] = self.report.as_dict()
        return out


def _finish(name, problem, control, grid, ens, basis, num, residual, scalars, tables, extras, est):
    extras["problem"] = problem
    report = None
    if num.verify:
        report = verify_optimality(problem, control, grid, ens, num.n_perturbations, num.magnitudes, num.seed,
                                   basis, num.tol, float(np.max(residual)), candidate_estimate=est)
    sol = est.solution
    i0, iT = grid.index_of(0.0), grid.index_of(problem.T)
    ym, yse = _path_summary(sol.y.values[:, i0:iT + 1, :1])
    zm, zse = _path_summary(sol.z.values[:, i0:iT + 1, :1])
    t = grid.nodes[i0:iT + 1]
    tables["state"] = (("t", "y_mean", "y_se", "z_mean", "z_se"), np.column_stack([t, ym, yse, zm, zse]))
    return ApplicationResult(name, control, est, residual, report, scalars, tables, extras)


# ----------------------------------------------------------------------------
# Application I: recursive utility with moving-average habit


def app1_problem(beta: float, alpha: float, R: float, T: float, xi="1") -> ControlProblem:
    """``y(t) = xi + int_t^T (alpha c + beta ybar) ds - int_t^T z dW`` with
    ``ybar(t) = (1/t) int_0^t y``; minimise ``-E int U(c) dt + y(0)``, ``U(c) = c^R/R``."""
    if not 0 < R < 1:
        raise DomainError("utility exponent needs 0 < R < 1")

    def U(c):
        return np.power(np.maximum(c, 0.0), R) / R

    def generator(t, y, yd, z, zd, v, vd):
        return alpha * v + beta * yd

    ham = HamiltonianSpec(
        running=lambda t, y, yd, z, zd, v, vd: U(v),
        generator=generator,
        partials={
            "yd": lambda t, y, yd, z, zd, v, vd, p: -beta * p,
            "v": lambda t, y, yd, z, zd, v, vd, p: np.power(v, R - 1) - alpha * p,
        },
        domain={"v": (0.2, 3.0), "p": (0.5, 2.0), "t": (0.0, T)},
    )
    return ControlProblem(
        name="app1", hamiltonian=ham, objective_running=lambda t, y, yd, z, zd, v, vd: -U(v),
        initial_cost=lambda y: np.sum(y), initial_cost_derivative=lambda y: np.ones_like(np.asarray(y)),
        sense="minimize", terminal=_terminal(xi), T=T, delay=0.0,
        aggregator=lambda g: running_average_matrix(g), admissible=(0.0, math.inf),
        lipschitz_C=max(abs(alpha), abs(beta), 1e-12))


def app1_solve(beta: float = 0.1, alpha: float = 1.0, R: float = 0.5, T: float = 1.0, xi="1",
               eps: float | None = None, growth: float = 1.01, numerics: Numerics | None = None,
               ensemble: PathEnsemble | None = None) -> ApplicationResult:
    """Optimal consumption ``c = (alpha p)^{1/(R-1)}`` with ``p`` from the integro-ODE."""
    num = numerics or Numerics()
    problem = app1_problem(beta, alpha, R, T, xi)
    integ = integro_ode_solve(IntegroODEProblem(beta, T, 1.0, eps, growth))
    grid = TimeGrid.uniform(0.0, T, max(1, round(T / num.dt)))
    p = integ.p(grid.nodes)
    if np.any(p <= 0):
        raise DomainError("adjoint p must be positive for the fractional power")
    c = np.power(alpha * p, 1.0 / (R - 1.0))
    ens = ensemble or generate_brownian(grid, num.n_paths, 1, num.seed)
    basis = RegressionBasis(num.degree)
    control = SampledProcess(grid, np.broadcast_to(c[None, :, None], (ens.n_paths, grid.n_nodes, 1)).copy())
    p_proc = SampledProcess(grid, np.broadcast_to(p[None, :, None], (ens.n_paths, grid.n_nodes, 1)).copy())
    est = objective_functional(problem, control, grid, ens, basis, num.tol)
    residual = maximum_condition_residual(problem, control, est.solution, p_proc)
    # independent check: adjoint ASDE built from the Hamiltonian on the same grid
    adj, _ = picard_solve_asde(build_adjoint(problem, control, est.solution), grid, ens, basis, 1e-12, 200)
    p_disc = adj.x.values[:, :, 0].mean(axis=0)
    scalars = {
        "beta": beta, "alpha": alpha, "R": R, "T": T,
        "p_T": float(integ.p.values[-1]), "pdot_T": float(integ.pdot[-1]),
        "integro_iterations": integ.n_iterations,
        "adjoint_discrete_vs_integro_sup": float(np.max(np.abs(p_disc - p))),
    }
    tables = {"control": (("t", "p", "c", "p_discrete_adjoint"), np.column_stack([grid.nodes, p, c, p_disc]))}
    res = _finish("app1", problem, control, grid, ens, basis, num, residual, scalars, tables, {"integro": integ},
                  est)
    return res


# ----------------------------------------------------------------------------
# Application II: pension fund with delayed surplus


def app2_range_check(alpha: float, r: float, kappa: float, lam: float, delta: float) -> dict:
    """Well-posedness bounds ``6 L^2 delta (1 + 2 delta^2 e)`` and ``4 L^2 delta (1 + delta^2 e) + delta``."""
    L = max(abs(alpha - r), alpha * kappa, lam)
    b1 = 6 * L ** 2 * delta * (1 + 2 * delta ** 2 * math.e)
    b2 = 4 * L ** 2 * delta * (1 + delta ** 2 * math.e) + delta
    return {"L": L, "bsde_bound": b1, "bsde_ok": b1 < 1, "asde_bound": b2, "asde_ok": b2 < 1}


def app2_problem(r, mu, sigma, alpha, kappa, delta, L, K, rho, R, T, xi="1") -> ControlProblem:
    """Surplus ``y`` with ``f = (alpha-r) y - lambda z - alpha kappa y(t-delta) + c``;
    maximise ``E int L e^{-rho t} c^{1-R}/(1-R) dt - K y(0)``."""
    if sigma <= 0:
        raise DomainError("market volatility must be positive")
    if mu < r:
        raise DomainError("need mu >= r")
    if not (R > 0 and R != 1):
        raise DomainError("need R > 0, R != 1")
    lam = (mu - r) / sigma

    def util(t, v):
        return L * np.exp(-rho * t) * np.power(np.maximum(v, 0.0), 1 - R) / (1 - R)

    ham = HamiltonianSpec(
        running=lambda t, y, yd, z, zd, v, vd: util(t, v),
        generator=lambda t, y, yd, z, zd, v, vd: (alpha - r) * y - lam * z - alpha * kappa * yd + v,
        partials={
            "y": lambda t, y, yd, z, zd, v, vd, p: -(alpha - r) * p,
            "z": lambda t, y, yd, z, zd, v, vd, p: lam * p,
            "yd": lambda t, y, yd, z, zd, v, vd, p: alpha * kappa * p,
            "v": lambda t, y, yd, z, zd, v, vd, p: L * np.exp(-rho * t) * np.power(v, -R) - p,
        },
        domain={"v": (0.2, 3.0), "p": (0.5, 2.0), "t": (0.0, T)},
    )
    measure = DelayMeasure.dirac(delta) if delta > 0 else None
    return ControlProblem(
        name="app2", hamiltonian=ham, objective_running=lambda t, y, yd, z, zd, v, vd: util(t, v),
        initial_cost=lambda y: -K * np.sum(y), initial_cost_derivative=lambda y: -K * np.ones_like(np.asarray(y)),
        sense="maximize", terminal=_terminal(xi), T=T, delay=delta, measure=measure, admissible=(0.0, math.inf),
        lipschitz_C=max(abs(alpha - r), alpha * kappa, lam, 1e-12))


def _embed_control(values_0T: np.ndarray, grid: TimeGrid, P: int) -> SampledProcess:
    i0 = grid.index_of(0.0)
    v = np.zeros((P, grid.n_nodes, 1))
    v[:, i0:i0 + values_0T.shape[1], :] = values_0T.reshape(P, -1, 1)
    return SampledProcess(grid, v)


def app2_solve(r=0.05, mu=0.09, sigma=0.1, alpha=0.1, kappa=0.5, delta=0.1, L=1.0, K=1.0, rho=0.02, R=0.5,
               T=1.0, xi="1", theta_threshold=1e-8, numerics: Numerics | None = None) -> ApplicationResult:
    """Optimal consumption ``c = (p e^{rho t}/L)^{-1/R}`` and risky proportion ``theta = z/(sigma y)``."""
    num = numerics or Numerics()
    problem = app2_problem(r, mu, sigma, alpha, kappa, delta, L, K, rho, R, T, xi)
    lam = (mu - r) / sigma
    spec = CharacteristicSpec(alpha, r, kappa, delta)
    h = characteristic_root(spec)
    master, delta_used = TimeGrid.for_delay(T, delta, num.dt, before=True, after=True)
    ens_master = generate_brownian(master, num.n_paths, 1, num.seed)
    sub, _ = master.slice(0.0, master.t_end)
    state_grid, _ = master.slice(master.t_start, T)
    ens = ens_master.restrict(master.t_start, T)
    q_ans = exponential_ansatz(spec, K, T, sub, h)
    q_pic = picard_solve_aode(AODEProblem(alpha - r, -alpha * kappa, delta_used, K, T), sub)
    lin = LinearAdjointSpec(a=alpha - r, b=alpha * kappa, c=lam, e=0.0, K=K, delta=delta_used, T=T)
    p_sol = martingale_decomposition_solve(lin, ens_master, q=q_pic)
    iT_sub = sub.index_of(T)
    p = p_sol.x.values[:, :iT_sub + 1, 0]
    t = sub.nodes[:iT_sub + 1]
    if np.any(p <= 0):
        raise DomainError("adjoint p must be positive for the consumption formula")
    c = np.power(p * np.exp(rho * t)[None, :] / L, -1.0 / R)
    control = _embed_control(c, state_grid, ens.n_paths)
    basis = RegressionBasis(num.degree)
    est = objective_functional(problem, control, state_grid, ens, basis, num.tol)
    residual = maximum_condition_residual(problem, control, est.solution, p_sol.x)
    sol = est.solution
    i0 = state_grid.index_of(0.0)
    y = sol.y.values[:, i0:, 0]
    z = sol.z.values[:, i0:, 0]
    ok = np.abs(y) > theta_threshold
    theta = np.where(ok, z / (sigma * np.where(ok, y, 1.0)), np.nan)
    theta_mean = np.array([np.mean(col[m]) if m.any() else np.nan for col, m in zip(theta.T, ok.T)])
    rc = app2_range_check(alpha, r, kappa, lam, delta_used)
    cm, cse = _path_summary(c[:, :, None])
    pm, pse = _path_summary(p[:, :, None])
    qa, qp = q_ans.values[:iT_sub + 1], q_pic.values[:iT_sub + 1]
    scalars = {
        "h": h, "lambda": lam, "delta": delta_used, "range_check": rc,
        "q_ansatz_vs_picard_sup_0_T_minus_delta": float(np.max(np.abs(qa - qp)[t <= T - delta_used + 1e-12])),
    }
    tables = {
        "control": (("t", "q_ansatz", "q_picard", "p_mean", "p_se", "c_mean", "c_se", "theta_mean"),
                    np.column_stack([t, qa, qp, pm, pse, cm, cse, theta_mean])),
    }
    extras = {"p": p_sol, "q_ansatz": q_ans, "q_picard": q_pic, "theta": theta, "master_grid": master,
              "master_ensemble": ens_master, "state_grid": state_grid, "state_ensemble": ens}
    return _finish("app2", problem, control, state_grid, ens, basis, num, residual, scalars, tables, extras, est)


def app2_adjoint_consistency(result: ApplicationResult, numerics: Numerics | None = None,
                             mode: str = "regression") -> tuple[float, int]:
    """Generic adjoint ASDE built from the Hamiltonian vs ``p = qM``: max nodal RMS and sweeps."""
    num = numerics or Numerics()
    ex = result.extras
    adj = build_adjoint(_problem_of(result), result.control, result.objective.solution)
    kw = {"martingale": ex["p"].extras["M"]} if mode == "martingale" else {}
    x, rep = picard_solve_asde(adj, ex["master_grid"], ex["master_ensemble"], RegressionBasis(num.degree),
                               num.tol, 100, mode=mode, **kw)
    diff = x.x.values - ex["p"].x.values
    return float(np.max(np.sqrt(np.mean(diff ** 2, axis=0)))), rep.n_iterations


def _problem_of(result: ApplicationResult) -> ControlProblem:
    return result.extras["problem"]


# ----------------------------------------------------------------------------
# Application III: linear-quadratic problem with delayed state and control channels


def app3_problem(beta1, beta2, gamma1, gamma2, alpha, R_fn: Callable, K, delta, T, xi="W") -> ControlProblem:
    """``f = -(beta1 y + beta2 y(t-delta) + gamma1 z + gamma2 z(t-delta) + alpha v)``;
    minimise ``E int R(t) v^2 / 2 dt + K y(0)``."""
    def gen(t, y, yd, z, zd, v, vd):
        return -(beta1 * y + beta2 * yd + gamma1 * z + gamma2 * zd + alpha * v)

    ham = HamiltonianSpec(
        running=lambda t, y, yd, z, zd, v, vd: -0.5 * R_fn(t) * v ** 2,
        generator=gen,
        partials={
            "y": lambda t, y, yd, z, zd, v, vd, p: beta1 * p,
            "yd": lambda t, y, yd, z, zd, v, vd, p: beta2 * p,
            "z": lambda t, y, yd, z, zd, v, vd, p: gamma1 * p,
            "zd": lambda t, y, yd, z, zd, v, vd, p: gamma2 * p,
            "v": lambda t, y, yd, z, zd, v, vd, p: -R_fn(t) * v + alpha * p,
        },
        domain={"v": (-2.0, 2.0), "p": (-2.0, 2.0), "t": (0.0, T)},
    )
    measure = DelayMeasure.dirac(delta) if delta > 0 else None
    return ControlProblem(
        name="app3", hamiltonian=ham, objective_running=lambda t, y, yd, z, zd, v, vd: 0.5 * R_fn(t) * v ** 2,
        initial_cost=lambda y: K * np.sum(y), initial_cost_derivative=lambda y: K * np.ones_like(np.asarray(y)),
        sense="minimize", terminal=_terminal(xi), T=T, delay=delta, measure=measure,
        lipschitz_C=max(abs(beta1), abs(beta2), abs(gamma1), abs(gamma2), abs(alpha), 1e-12))


def _R_function(R) -> Callable:
    if callable(R):
        return lambda t: np.asarray(R(t), dtype=float)
    val = float(R)
    return lambda t: np.full(np.shape(t), val) if np.ndim(t) else val


def app3_solve(beta1=0.1, beta2=0.05, gamma1=0.2, gamma2=0.1, alpha=1.0, R=1.0, K=1.0, delta=0.1, T=1.0,
               xi="W", numerics: Numerics | None = None) -> ApplicationResult:
    """Optimal control ``u = alpha p / R(t)`` with ``p = q M``."""
    num = numerics or Numerics()
    R_fn = _R_function(R)
    problem = app3_problem(beta1, beta2, gamma1, gamma2, alpha, R_fn, K, delta, T, xi)
    master, delta_used = TimeGrid.for_delay(T, delta, num.dt, before=True, after=True)
    sub, _ = master.slice(0.0, master.t_end)
    iT_sub = sub.index_of(T)
    t = sub.nodes[:iT_sub + 1]
    Rv = np.broadcast_to(R_fn(t), t.shape)
    if np.any(Rv <= 0):
        raise DomainError("R(t) must be strictly positive on [0, T]")
    coupled = coupled_aode_solve(beta1, beta2, gamma1, gamma2, K, delta_used, T, sub)
    ens_master = generate_brownian(master, num.n_paths, 1, num.seed)
    state_grid, _ = master.slice(master.t_start, T)
    ens = ens_master.restrict(master.t_start, T)
    lin = LinearAdjointSpec(a=-beta1, b=beta2, c=gamma1, e=gamma2, K=K, delta=delta_used, T=T)
    p_sol = martingale_decomposition_solve(lin, ens_master, q=coupled.q_picard)
    p = p_sol.x.values[:, :iT_sub + 1, 0]
    u = alpha * p / Rv[None, :]
    control = _embed_control(u, state_grid, ens.n_paths)
    basis = RegressionBasis(num.degree)
    est = objective_functional(problem, control, state_grid, ens, basis, num.tol)
    residual = maximum_condition_residual(problem, control, est.solution, p_sol.x)
    um, use = _path_summary(u[:, :, None])
    pm, pse = _path_summary(p[:, :, None])
    prof = coupled.gamma_profile[:iT_sub + 1]
    scalars = {"h": coupled.h, "gamma": coupled.gamma, "delta": delta_used,
               "gamma_layer_deviation": coupled.layer_deviation(T, delta_used)}
    tables = {"control": (("t", "q_picard", "gamma_t", "p_mean", "p_se", "u_mean", "u_se"),
                          np.column_stack([t, coupled.q_picard.values[:iT_sub + 1], prof, pm, pse, um, use]))}
    extras = {"p": p_sol, "coupled": coupled, "master_grid": master, "master_ensemble": ens_master,
              "state_grid": state_grid, "state_ensemble": ens}
    return _finish("app3", problem, control, state_grid, ens, basis, num, residual, scalars, tables, extras, est)
