"""The eleven acceptance criteria at their stated tolerances.

Each test logs one PASS/FAIL line (collected in the terminal summary) and
then asserts the criterion.  The application fixtures run the full
verification (10^4 paths, 50 perturbations) and take a few minutes.
"""

import itertools
import math
import time

import numpy as np
import pytest

from delaysmp import cli
from delaysmp.aode import (
    AODEProblem,
    CharacteristicSpec,
    IntegroODEProblem,
    aode_residual,
    characteristic_root,
    exponential_ansatz,
    integro_derivative_residuals,
    integro_ode_solve,
    picard_solve_aode,
)
from delaysmp.asde import euler_maruyama
from delaysmp.bsde import DelayedBSDEProblem, picard_solve
from delaysmp.calculus import DelayMeasure, TimeGrid
from delaysmp.control import (
    Numerics,
    app1_problem,
    app1_solve,
    app2_adjoint_consistency,
    app2_problem,
    app2_solve,
    app3_problem,
    app3_solve,
    fubini_duality_check,
)
from delaysmp.montecarlo import generate_brownian

ACCEPT = Numerics(dt=5e-3, n_paths=10_000, seed=0, n_perturbations=50, magnitudes=(0.02, 0.1, 0.5))


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def app_results():
    cache = {}

    def get(name):
        if name not in cache:
            solve = {"app1": app1_solve, "app2": app2_solve, "app3": app3_solve}[name]
            cache[name] = timed(lambda: solve(numerics=ACCEPT))
        return cache[name]
    return get


def test_criterion_01_characteristic(acceptance_log):
    def run():
        worst = 0.0
        monotone = True
        rng = np.random.default_rng(0)
        for a, r, k, d in itertools.product(np.linspace(0, 0.2, 5), np.linspace(0, 0.1, 5),
                                            np.linspace(0, 1, 5), np.linspace(0, 0.2, 5)):
            spec = CharacteristicSpec(a, r, k, d)
            h = characteristic_root(spec)
            worst = max(worst, abs(float(spec.F(h)) - spec.growth))
            h1, h2 = np.sort(rng.uniform(-5, 5, 2))
            monotone &= bool(h1 == h2 or spec.F(h1) < spec.F(h2))
        return worst, monotone
    (worst, monotone), secs = timed(run)
    ok = worst <= 1e-10 and monotone and secs < 1
    acceptance_log(1, ok, f"max |F(h*)-(alpha-r)| = {worst:.2e} (<= 1e-10), monotone = {monotone}, {secs:.2f} s")
    assert ok


def test_criterion_02_aode(acceptance_log):
    def run():
        alpha, r, kappa, delta, K, T = 0.1, 0.05, 0.5, 0.1, 1.0, 1.0
        grid, d = TimeGrid.for_delay(T, delta, 1e-3, before=False, after=True)
        spec = CharacteristicSpec(alpha, r, kappa, d)
        h = characteristic_root(spec)
        prob = AODEProblem(alpha - r, -alpha * kappa, d, K, T)
        q = picard_solve_aode(prob, grid)
        ans = exponential_ansatz(spec, K, T, grid, h)
        t = grid.nodes
        inner = t <= T - d + 1e-12
        sup = float(np.max(np.abs(q.values[inner] - ans.values[inner])))
        layer = aode_residual(ans, prob, grid)
        bound = 0.9 * alpha * kappa * K * math.exp(h * (T - d))
        return sup, layer.min_abs_layer, layer.max_abs_layer, bound
    (sup, lmin, lmax, bound), secs = timed(run)
    ok = sup <= 1e-4 and lmin >= bound and secs < 5
    acceptance_log(2, ok, f"sup|q_ans - q_pic| on [0,T-d] = {sup:.2e} (<= 1e-4); ansatz layer residual in "
                          f"[{lmin:.4f}, {lmax:.4f}] >= {bound:.4f}; {secs:.2f} s")
    assert ok


def test_criterion_03_bsde(acceptance_log):
    def run():
        grid, delta = TimeGrid.for_delay(1.0, 0.1, 5e-3)
        ens = generate_brownian(grid, 10_000, 1, 0)
        WT = lambda e: e.W(e.grid.n_nodes - 1)[:, :1].copy()
        gen = lambda t, y, yd, z, zd: 0.5 * y + 0.5 * yd + 0.3 * z + 0.2 * zd
        prob = DelayedBSDEProblem(gen, WT, 1.0, delta, DelayMeasure.dirac(delta), lipschitz_C=0.5)
        _, rep = picard_solve(prob, grid, ens, tol=1e-10)
        plain = DelayedBSDEProblem(lambda t, y, yd, z, zd: 0 * y, WT, 1.0)
        g0, _ = grid.slice(0.0, 1.0)
        e0 = ens.restrict(0.0, 1.0)
        sol, _ = picard_solve(plain, g0, e0)
        W = e0.cumulative[:, :, 0]
        ry = float(np.sqrt(np.mean((sol.y.values[:, :, 0] - W) ** 2)))
        rz = float(np.sqrt(np.mean((sol.z.values[:, :-1, 0] - 1.0) ** 2)))
        return rep, ry, rz
    (rep, ry, rz), secs = timed(run)
    tol = 5 * max(10_000 ** -0.5, 5e-3 ** 0.5)
    ratio = max(rep.ratios) if rep.ratios else float("nan")
    ok = (rep.theoretical_K < 0.5 and len(rep.ratios) >= 4 and ratio <= rep.theoretical_K + 0.1
          and ry <= tol and rz <= tol and secs < 120)
    acceptance_log(3, ok, f"K = {rep.theoretical_K:.4f}, max ratio = {ratio:.4f} over {len(rep.ratios)} sweeps; "
                          f"RMS y = {ry:.4f}, z = {rz:.4f} (<= {tol:.4f}); {secs:.1f} s")
    assert ok


def test_criterion_04_strong_order(acceptance_log):
    mu, sig, x0, T = 0.05, 0.5, 1.0, 1.0
    steps = (4e-3, 1e-3, 2.5e-4)

    def run():
        fine = TimeGrid.uniform(0.0, T, round(T / steps[-1]))
        sq = np.zeros(len(steps))
        n = 0
        for b in range(4):
            ens = generate_brownian(fine, 2500, 1, 100 + b)
            exact = x0 * np.exp((mu - 0.5 * sig ** 2) * T + sig * ens.W(fine.n_nodes - 1)[:, 0])
            for j, h in enumerate(steps):
                e = ens.coarsen(round(h / steps[-1]))
                x = euler_maruyama(lambda t, x: mu * x, lambda t, x: sig * x, x0, e.grid, e)
                sq[j] += np.sum((x[:, -1] - exact) ** 2)
            n += ens.n_paths
        rms = np.sqrt(sq / n)
        order = np.polyfit(np.log(steps), np.log(rms), 1)[0]
        return rms, order
    (rms, order), secs = timed(run)
    ok = order >= 0.45 and secs < 120
    acceptance_log(4, ok, f"RMS terminal errors {', '.join(f'{x:.2e}' for x in rms)}; order = {order:.3f} "
                          f"(>= 0.45); {secs:.1f} s")
    assert ok


def test_criterion_05_decomposition(acceptance_log, app_results):
    res, _ = app_results("app2")
    (rms, sweeps), secs = timed(lambda: app2_adjoint_consistency(res, ACCEPT))
    tol = 5 * (ACCEPT.n_paths ** -0.5 + ACCEPT.dt)
    ok = rms <= tol and secs < 120
    acceptance_log(5, ok, f"max nodal RMS |p_picard - qM| = {rms:.4f} (<= {tol:.4f}) in {sweeps} sweeps; {secs:.1f} s")
    assert ok


def test_criterion_06_fubini(acceptance_log):
    def run():
        grid, delta = TimeGrid.for_delay(1.0, 0.1, 5e-3, before=True, after=False)
        ens = generate_brownian(grid, 1000, 1, 1)
        rng = np.random.default_rng(1)
        H = np.tanh(ens.cumulative) + rng.normal(size=ens.cumulative.shape)
        u = np.cos(grid.nodes)[None, :, None] * np.ones_like(H)
        v = u + ens.cumulative ** 2
        return {k: fubini_duality_check(H, u, v, m, None, grid, 1.0)
                for k, m in (("dirac", DelayMeasure.dirac(delta)), ("lebesgue", DelayMeasure.lebesgue(delta)))}
    out, secs = timed(run)
    ok = all(r.defect <= 1e-12 for r in out.values()) and secs < 10
    acceptance_log(6, ok, "; ".join(f"{k}: lhs = {r.lhs:.6f}, defect = {r.defect:.1e}" for k, r in out.items())
                   + f" (<= 1e-12, 1000 paths, 200 steps on [0,T]); {secs:.1f} s")
    assert ok


@pytest.mark.parametrize("name", ["app1", "app2", "app3"])
def test_criterion_07_stationarity(acceptance_log, app_results, name):
    res, secs = app_results(name)
    worst = float(res.residual.max())
    ok = worst <= 1e-8
    acceptance_log(7, ok, f"{name}: max stationarity residual = {worst:.2e} (<= 1e-8); pipeline {secs:.0f} s")
    assert ok


@pytest.mark.parametrize("name", ["app1", "app2", "app3"])
def test_criterion_08_optimality(acceptance_log, app_results, name):
    res, secs = app_results(name)
    rep = res.report
    gains = [res.extras["problem"].sign * (J - rep.J_candidate[0]) for _, _, _, J, _ in rep.J_perturbed]
    ok = rep.violations == 0 and len(rep.J_perturbed) == 50 and secs < 600
    acceptance_log(8, ok, f"{name}: J = {rep.J_candidate[0]:.6f} +- {rep.J_candidate[1]:.1e}, "
                          f"{len(gains)} perturbations, violations = {rep.violations}, "
                          f"max gain = {max(gains):.2e}; {secs:.0f} s")
    assert ok


def test_criterion_09_ranges(acceptance_log):
    def run():
        rng = np.random.default_rng(9)
        worst = 0.0
        flags = True
        for _ in range(20):
            alpha, r = rng.uniform(0, 2), rng.uniform(0, 0.2)
            kappa, sigma = rng.uniform(0, 2), rng.uniform(0.05, 1)
            mu = r + rng.uniform(0, 0.5)
            delta = rng.uniform(0.01, 0.6)
            text = (f"[run]\ncommand = app2\n[parameters]\nalpha = {alpha!r}\nr = {r!r}\nkappa = {kappa!r}\n"
                    f"sigma = {sigma!r}\nmu = {mu!r}\ndelta = {delta!r}\n")
            cfg = cli.parse_config(text)
            rc = cli.well_posedness(cfg)["range_check"]
            lam = (mu - r) / sigma
            L = max(abs(alpha - r), alpha * kappa, lam)
            b1 = 6.0 * L * L * delta + 12.0 * L * L * delta ** 3 * math.e
            b2 = 4.0 * L * L * delta + 4.0 * L * L * delta ** 3 * math.e + delta
            worst = max(worst, abs(rc["bsde_bound"] - b1) / b1, abs(rc["asde_bound"] - b2) / b2)
            w = cli.validate(cfg)
            flags &= (any("2 delta^2 e" in s for s in w) == (b1 >= 1)) and (any("+ delta =" in s for s in w) == (b2 >= 1))
        return worst, flags
    (worst, flags), secs = timed(run)
    ok = worst <= 4 * np.finfo(float).eps and flags and secs < 1
    acceptance_log(9, ok, f"20 draws: max relative difference of both bounds = {worst:.1e} (rounding level), "
                          f"warnings consistent = {flags}; {secs:.2f} s")
    assert ok


def test_criterion_10_integro(acceptance_log):
    beta, T = 0.1, 1.0
    eps = 1e-6 * T

    def run():
        sol = integro_ode_solve(IntegroODEProblem(beta, T, 1.0, eps, growth=1.00005))
        return sol, integro_derivative_residuals(sol, beta, eps)
    (sol, r), secs = timed(run)
    pdot_T = abs(float(sol.pdot[-1]))
    ok = r["second"] <= 1e-3 and r["first"] <= 1e-3 and pdot_T <= 1e-10 and secs < 5
    acceptance_log(10, ok, f"graded mesh eps = {eps:g}, ratio 1.00005 ({sol.grid.n_nodes} nodes): "
                           f"max |D pdot + beta p/t| = {r['second']:.2e}, max |D p - pdot| = {r['first']:.1e} "
                           f"(<= 1e-3), |pdot(T)| = {pdot_T:.1e}; plain 3-point stencil on p = {r['stencil']:.1e} "
                           f"(rounding-bound); {secs:.2f} s")
    assert ok


def test_criterion_11_partials(acceptance_log):
    problems = {
        "app1": app1_problem(0.1, 1.0, 0.5, 1.0),
        "app2": app2_problem(0.05, 0.09, 0.1, 0.1, 0.5, 0.1, 1.0, 1.0, 0.02, 0.5, 1.0),
        "app3": app3_problem(0.1, 0.05, 0.2, 0.1, 1.0, lambda t: np.ones_like(np.asarray(t, float)), 1.0, 0.1, 1.0),
    }
    errs, secs = timed(lambda: {k: max(p.hamiltonian.check_partials(n_points=100, seed=11).values())
                                for k, p in problems.items()})
    ok = all(e <= 1e-5 for e in errs.values()) and secs < 5
    acceptance_log(11, ok, ", ".join(f"{k}: {e:.1e}" for k, e in errs.items()) + f" (<= 1e-5); {secs:.2f} s")
    assert ok
