"""Advanced SDE Picard solver and the p = qM decomposition."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from delaysmp.aode import AODEProblem, picard_solve_aode
from delaysmp.asde import (
    ASDEProblem,
    LinearAdjointSpec,
    asde_contraction_constant,
    euler_maruyama,
    martingale_decomposition_solve,
    picard_solve_asde,
)
from delaysmp.calculus import DelayMeasure, TimeGrid
from delaysmp.errors import DomainError, NonConvergenceError, StructureError
from delaysmp.montecarlo import RegressionBasis, generate_brownian


@pytest.fixture(scope="module")
def adv_setup():
    grid, delta = TimeGrid.for_delay(1.0, 0.1, 1e-2, before=False, after=True)
    return grid, delta, generate_brownian(grid, 2000, 1, 17)


class TestContractionConstant:
    def test_dirac_value(self):
        c = asde_contraction_constant(1.0, 1.0, 0.1, DelayMeasure.dirac(0.1), beta=10.0)
        assert c.K_prime == pytest.approx(4 * (1 + 0.1 * math.e) / 9, rel=1e-14)
        assert c.bound_form == pytest.approx(0.4 * (1 + 0.1 * math.e) / 0.9, rel=1e-14)

    def test_lebesgue_value(self):
        c = asde_contraction_constant(1.0, 1.0, 0.1, DelayMeasure.lebesgue(0.1))
        # int_0^delta e^{s/delta} ds = delta (e - 1)
        assert c.K_prime == pytest.approx(4 * (1 + 0.01 * (math.e - 1)) / 9, rel=1e-13)

    @given(C1=st.floats(0.01, 2), C2=st.floats(0.01, 2))
    def test_monotone_in_C(self, C1, C2):
        m = DelayMeasure.dirac(0.1)
        k1 = asde_contraction_constant(C1, 1.0, 0.1, m).K_prime
        k2 = asde_contraction_constant(C2, 1.0, 0.1, m).K_prime
        assert (k1 - k2) * (C1 - C2) >= 0
        assert asde_contraction_constant(1e-8, 1.0, 0.1, m).K_prime < 1e-15

    def test_beta_domain(self):
        with pytest.raises(DomainError):
            asde_contraction_constant(1.0, 1.0, 0.1, DelayMeasure.dirac(0.1), beta=1.0)
        with pytest.raises(DomainError):
            asde_contraction_constant(1.0, 1.0, 2.0, DelayMeasure.dirac(2.0))


class TestPicardASDE:
    def test_gbm_reduces_to_euler_bitwise(self):
        grid = TimeGrid.uniform(0.0, 1.0, 100)
        ens = generate_brownian(grid, 500, 1, 2)
        prob = ASDEProblem(lambda t, x, a: 0.05 * x, lambda t, x, a: 0.2 * x, 1.0, 1.0)
        sol, rep = picard_solve_asde(prob, grid, ens)
        ref = euler_maruyama(lambda t, x: 0.05 * x, lambda t, x: 0.2 * x, 1.0, grid, ens)
        assert rep.n_iterations == 1
        assert np.array_equal(sol.x.values[:, :, 0], ref)

    def test_zero_coefficients(self, adv_setup):
        grid, delta, ens = adv_setup
        prob = ASDEProblem(lambda t, x, a: 0 * x, lambda t, x, a: 0 * x, 3.0, 1.0, delay=delta,
                           measure=DelayMeasure.dirac(delta))
        sol, _ = picard_solve_asde(prob, grid, ens)
        iT = sol.grid.index_of(1.0)
        assert np.all(sol.x.values[:, :iT + 1] == 3.0)
        assert np.all(sol.x.values[:, iT + 1:] == 0.0)

    def test_terminal_path_spliced(self, adv_setup):
        grid, delta, ens = adv_setup
        prob = ASDEProblem(lambda t, x, a: -a, lambda t, x, a: 0.1 * x, 1.0, 1.0, terminal_path=lambda t: 2 + t,
                           delay=delta, measure=DelayMeasure.dirac(delta))
        sol, _ = picard_solve_asde(prob, grid, ens)
        t = sol.grid.nodes
        after = t > 1.0 + 1e-12
        assert np.all(sol.x.values[0, after, 0] == 2 + t[after])
        assert np.all(sol.x.values[:, 0, 0] == 1.0)

    def test_matches_decomposition(self, adv_setup):
        grid, delta, ens = adv_setup
        spec = LinearAdjointSpec(a=0.05, b=0.05, c=0.4, e=0.0, K=1.0, delta=delta, T=1.0)
        sol, rep = picard_solve_asde(spec.asde_problem(), grid, ens)
        ref = martingale_decomposition_solve(spec, ens)
        rms = np.sqrt(np.mean((sol.x.values - ref.x.values) ** 2, axis=0))
        assert rms.max() <= 5 * (ens.n_paths ** -0.5 + 1e-2)
        assert max(rep.ratios) <= rep.theoretical_K + 0.1
        sol_m, _ = picard_solve_asde(spec.asde_problem(), grid, ens, mode="martingale",
                                     martingale=ref.extras["M"])
        assert np.sqrt(np.mean((sol_m.x.values - ref.x.values) ** 2, axis=0)).max() <= 5 * (
            ens.n_paths ** -0.5 + 1e-2)

    def test_adapted(self, adv_setup):
        grid, delta, ens = adv_setup
        spec = LinearAdjointSpec(a=0.05, b=0.3, c=0.4, e=0.2, K=1.0, delta=delta, T=1.0)
        sol, _ = picard_solve_asde(spec.asde_problem(), grid, ens)
        i = sol.grid.index_of(0.5)
        future = ens.W(grid.index_of(1.0))[:, 0] - ens.W(grid.index_of(0.5))[:, 0]
        x = sol.x.values[:, i, 0]
        coef = np.cov(x, future)[0, 1] / future.var()
        assert abs(coef) <= 4 * x.std() / (future.std() * math.sqrt(ens.n_paths))

    def test_nonconvergence(self, adv_setup):
        grid, delta, ens = adv_setup
        spec = LinearAdjointSpec(a=0.05, b=0.5, c=0.4, e=0.0, K=1.0, delta=delta, T=1.0)
        with pytest.raises(NonConvergenceError) as exc:
            picard_solve_asde(spec.asde_problem(), grid, ens, tol=1e-30, max_iter=2)
        assert len(exc.value.history) == 2

    def test_grid_mismatch(self, adv_setup):
        grid, delta, ens = adv_setup
        other = TimeGrid.uniform(0.0, 1.1, 55, T=1.0)
        spec = LinearAdjointSpec(a=0.0, b=0.0, c=0.0, e=0.0, K=1.0, delta=delta, T=1.0)
        with pytest.raises(Exception):
            picard_solve_asde(spec.asde_problem(), other, ens)


class TestDecomposition:
    def test_deterministic_case(self, adv_setup):
        grid, delta, ens = adv_setup
        spec = LinearAdjointSpec(a=0.3, b=0.0, c=0.0, e=0.0, K=2.0, delta=delta, T=1.0)
        sol = martingale_decomposition_solve(spec, ens)
        t = sol.grid.nodes
        on = t <= 1.0 + 1e-12
        assert np.allclose(sol.x.values[:, on, 0], 2.0 * np.exp(0.3 * t[on]), rtol=1e-12)
        assert np.all(sol.x.values[:, ~on] == 0.0)

    def test_structure_error(self, adv_setup):
        _, delta, ens = adv_setup
        spec = LinearAdjointSpec(a=0.1, b=0.1, c=0.2, e=0.0, K=1.0, delta=delta, T=1.0, diffusion_constant=0.1)
        with pytest.raises(StructureError):
            martingale_decomposition_solve(spec, ens)

    def test_discrete_residual_first_order(self):
        # dp = (-b1 p - b2 E p(t+d)) dt + (-g1 p - g2 E p(t+d)) dW with E_t p(t+d) = q(t+d) M(t)
        b1, b2, g1, g2, d = 0.1, 0.05, 0.2, 0.1, 0.1
        rms = []
        steps = (1e-2, 2.5e-3)
        for h in steps:
            grid, delta = TimeGrid.for_delay(1.0, d, h, before=False, after=True)
            ens = generate_brownian(grid, 4000, 1, 3)
            spec = LinearAdjointSpec(a=-b1, b=b2, c=g1, e=g2, K=1.0, delta=delta, T=1.0)
            q = picard_solve_aode(AODEProblem(-b1, -b2, delta, 1.0, 1.0), grid)
            sol = martingale_decomposition_solve(spec, ens, q=q)
            p = sol.x.values[:, :, 0]
            M = sol.extras["M"].values[:, :, 0]
            m = round(delta / h)
            iT = grid.index_of(1.0)
            i = np.arange(iT)
            adv = q.values[i + m][None, :] * M[:, i]
            r = (p[:, i + 1] - p[:, i] - (-b1 * p[:, i] - b2 * adv) * h
                 + (g1 * p[:, i] + g2 * adv) * ens.increments[:, i, 0])
            rms.append(np.sqrt(np.mean(r ** 2)))
        order = math.log(rms[0] / rms[1]) / math.log(steps[0] / steps[1])
        assert order >= 0.9
        assert rms[1] < 5 * steps[1]

    def test_time_varying_rate_recorded(self, adv_setup):
        grid, delta, ens = adv_setup
        spec = LinearAdjointSpec(a=-0.1, b=0.05, c=0.2, e=0.1, K=1.0, delta=delta, T=1.0)
        sol = martingale_decomposition_solve(spec, ens)
        g = sol.extras["gamma_t"]
        iT = sol.grid.index_of(1.0)
        assert np.all(g[iT:] == 0.2)
        assert np.all(g[:iT] >= 0.2) and np.std(g[:iT]) > 0
