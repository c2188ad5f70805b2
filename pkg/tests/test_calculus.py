"""Grids, delay measures, window integrals and boundary splicing."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from delaysmp.calculus import (
    DelayKernel,
    DelayMeasure,
    MeasureKind,
    SampledProcess,
    TimeGrid,
    advanced_aggregate,
    aggregation_matrix,
    delayed_aggregate,
    exp_weighted_mass,
    running_average_matrix,
    splice_boundary_path,
    window_weights,
)
from delaysmp.errors import (
    BoundaryOverlapError,
    ConfigurationError,
    MissingInitialPathError,
    MissingTerminalPathError,
)


def proc_of(grid, fn, n_paths=3):
    return SampledProcess.deterministic(grid, fn, n_paths)


class TestTimeGrid:
    def test_uniform_spacing(self):
        g = TimeGrid.uniform(-0.1, 1.0, 220, T=1.0)
        assert g.nodes[0] == -0.1 and g.nodes[-1] == 1.0
        assert np.allclose(g.dt, g.dt[0], rtol=1e-12, atol=0)
        assert g.find(0.0) is not None and g.find(1.0) is not None

    def test_nodes_strictly_increasing_required(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]), 1.0)

    def test_horizon_must_be_node(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 0.4, 1.0]), 0.5)

    def test_for_delay_places_boundaries_on_nodes(self):
        g, d = TimeGrid.for_delay(1.0, 0.1, 5e-3, before=True, after=True)
        assert d == pytest.approx(0.1)
        for t in (-0.1, 0.0, 0.9, 1.0, 1.1):
            assert g.find(t) is not None

    def test_for_delay_refines_rational_ratio(self):
        g, d = TimeGrid.for_delay(1.0, 0.125, 0.1)
        assert d == 0.125
        assert g.find(-0.125) is not None and g.find(0.875) is not None
        assert g.dt.max() <= 0.1 + 1e-12

    def test_for_delay_snaps_irrational_delay(self, caplog):
        g, d = TimeGrid.for_delay(1.0, 1 / math.pi, 0.01)
        assert abs(d - 1 / math.pi) <= 0.005 + 1e-12
        assert g.find(-d) is not None
        assert "snap" in caplog.text.lower()

    def test_graded_density_decreases_away_from_zero(self):
        g = TimeGrid.graded(1.0, 1e-6, 1.01)
        h = g.dt
        assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
        assert np.all(np.diff(h[:-1]) > 0)

    def test_locate_and_slice(self):
        g = TimeGrid.uniform(0.0, 1.0, 10)
        i, theta = g.locate(0.25)
        assert i == 2 and theta == pytest.approx(0.5)
        sub, off = g.slice(0.2, 0.6)
        assert off == 2 and sub.n_steps == 4
        with pytest.raises(KeyError):
            g.index_of(0.33)


class TestDelayMeasure:
    def test_masses(self):
        assert DelayMeasure.dirac(0.2).total_mass() == 1.0
        assert DelayMeasure.lebesgue(0.2).total_mass() == 0.2
        assert DelayMeasure.finite_atoms([(-0.1, 0.3), (-0.2, 0.5)]).total_mass() == pytest.approx(0.8)

    def test_dirac_concentrates_at_lag(self):
        assert DelayMeasure.dirac(0.3).point_masses() == ((-0.3, 1.0),)

    def test_atoms_outside_window_rejected(self):
        with pytest.raises(ValueError):
            DelayMeasure(MeasureKind.ATOMS, 0.1, ((-0.2, 1.0),))

    def test_kernel_bound_check(self):
        k = DelayKernel(lambda t, s: np.cos(t - s), bound=1.0)
        t = np.linspace(0, 1, 20)
        assert k.check_bound(t, t[::-1])
        assert not DelayKernel(lambda t, s: 2 + 0 * s, bound=1.0).check_bound(t, t)


class TestWindowIntegrals:
    grid = TimeGrid.uniform(-0.2, 1.2, 280, T=1.0)

    def test_dirac_returns_lagged_value(self):
        p = proc_of(self.grid, lambda t: t ** 2)
        i = self.grid.index_of(0.7)
        out = delayed_aggregate(p, i, DelayMeasure.dirac(0.2))
        assert np.allclose(out, 0.5 ** 2, atol=1e-14)

    def test_lebesgue_constant(self):
        p = proc_of(self.grid, lambda t: 3.0 + 0 * t)
        out = delayed_aggregate(p, self.grid.index_of(0.5), DelayMeasure.lebesgue(0.2))
        assert np.allclose(out, 0.6, atol=1e-13)

    def test_lebesgue_linear_exact(self):
        p = proc_of(self.grid, lambda t: t)
        out = delayed_aggregate(p, self.grid.index_of(1.0), DelayMeasure.lebesgue(0.2))
        assert np.allclose(out, 0.18, atol=1e-13)

    def test_advanced_dirac_and_exponential(self):
        p = proc_of(self.grid, np.exp)
        i0 = self.grid.index_of(0.0)
        assert np.allclose(advanced_aggregate(p, i0, DelayMeasure.dirac(0.1)), math.exp(0.1), atol=1e-12)
        # trapezoid error h^2/12 * int e^s for h = 5e-3
        out = advanced_aggregate(p, i0, DelayMeasure.lebesgue(0.1))
        assert np.allclose(out, math.expm1(0.1), atol=(5e-3) ** 2 / 12 * 1.2)

    def test_advanced_zero_integrand(self):
        p = SampledProcess.zeros(self.grid, 2)
        i = self.grid.index_of(0.4)
        for m in (DelayMeasure.dirac(0.1), DelayMeasure.lebesgue(0.1), DelayMeasure.finite_atoms([(-0.05, 2.0)])):
            assert np.all(advanced_aggregate(p, i, m) == 0)

    def test_missing_paths(self):
        g = TimeGrid.uniform(0.0, 1.0, 100)
        p = proc_of(g, np.sin)
        with pytest.raises(MissingInitialPathError):
            delayed_aggregate(p, g.index_of(0.05), DelayMeasure.dirac(0.1))
        with pytest.raises(MissingTerminalPathError):
            advanced_aggregate(p, g.index_of(0.95), DelayMeasure.dirac(0.1))

    def test_off_grid_atom_interpolates_or_rejects(self):
        p = proc_of(self.grid, lambda t: 2 * t + 1)
        m = DelayMeasure.finite_atoms([(-0.0123, 1.0)])
        i = self.grid.index_of(0.5)
        assert np.allclose(delayed_aggregate(p, i, m), 2 * (0.5 - 0.0123) + 1, atol=1e-13)
        with pytest.raises(ConfigurationError):
            delayed_aggregate(p, i, m, strict=True)

    def test_dirac_equals_single_atom(self):
        p = proc_of(self.grid, np.cos)
        i = self.grid.index_of(0.6)
        a = delayed_aggregate(p, i, DelayMeasure.dirac(0.15))
        b = delayed_aggregate(p, i, DelayMeasure.finite_atoms([(-0.15, 1.0)], lag=0.15))
        assert np.array_equal(a, b)

    def test_kernel_weights_integrand(self):
        p = proc_of(self.grid, lambda t: 1.0 + 0 * t)
        k = DelayKernel(lambda t, s: (t - s), bound=1.0)
        out = delayed_aggregate(p, self.grid.index_of(0.8), DelayMeasure.lebesgue(0.2), k)
        assert np.allclose(out, 0.02, atol=1e-13)

    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), t=st.sampled_from([0.0, 0.3, 0.55, 1.0]),
           kind=st.sampled_from(["dirac", "lebesgue", "atoms"]))
    def test_linearity(self, a, b, t, kind):
        m = {"dirac": DelayMeasure.dirac(0.2), "lebesgue": DelayMeasure.lebesgue(0.2),
             "atoms": DelayMeasure.finite_atoms([(-0.05, 0.4), (-0.17, 1.3)], lag=0.2)}[kind]
        p1 = proc_of(self.grid, np.sin)
        p2 = proc_of(self.grid, lambda s: s ** 3)
        comb = SampledProcess(self.grid, a * p1.values + b * p2.values)
        i = self.grid.index_of(t)
        lhs = delayed_aggregate(comb, i, m)
        rhs = a * delayed_aggregate(p1, i, m) + b * delayed_aggregate(p2, i, m)
        assert np.allclose(lhs, rhs, rtol=1e-13, atol=1e-13)

    @given(seed=st.integers(0, 10_000), kind=st.sampled_from(["dirac", "lebesgue", "atoms"]))
    def test_kernel_mass_bound(self, seed, kind):
        r = np.random.default_rng(seed)
        m = {"dirac": DelayMeasure.dirac(0.2), "lebesgue": DelayMeasure.lebesgue(0.2),
             "atoms": DelayMeasure.finite_atoms([(-0.05, 0.4), (-0.2, 1.3)])}[kind]
        vals = r.normal(size=(2, self.grid.n_nodes, 1))
        p = SampledProcess(self.grid, vals)
        k = DelayKernel(lambda t, s: 0.7 * np.sin(5 * s + t), bound=0.7)
        i = self.grid.index_of(0.5)
        idx, _ = window_weights(self.grid, 0.5, m, k)
        bound = 0.7 * m.total_mass() * np.abs(vals[:, idx, 0]).max()
        assert np.all(np.abs(delayed_aggregate(p, i, m, k)) <= bound * (1 + 1e-12))

    @pytest.mark.parametrize("kind", ["dirac", "lebesgue", "atoms"])
    def test_time_reversal_duality(self, kind):
        m = {"dirac": DelayMeasure.dirac(0.2), "lebesgue": DelayMeasure.lebesgue(0.2),
             "atoms": DelayMeasure.finite_atoms([(-0.05, 0.4), (-0.2, 1.3)])}[kind]
        g = TimeGrid.uniform(-0.5, 0.5, 200, T=0.5)
        p = proc_of(g, lambda t: np.exp(t) * np.sin(3 * t))
        rev = p.time_reversed(0.0)
        i = g.index_of(0.3)
        j = rev.grid.index_of(-0.3)
        assert np.allclose(delayed_aggregate(p, i, m), advanced_aggregate(rev, j, m), atol=1e-13)

    def test_matrix_matches_pointwise(self):
        m = DelayMeasure.lebesgue(0.2)
        p = proc_of(self.grid, np.cos)
        rows = range(self.grid.index_of(0.0), self.grid.index_of(1.0) + 1)
        A = aggregation_matrix(self.grid, m, rows=rows, embed=True)
        agg = A @ p.values[0, :, 0]
        for i in (self.grid.index_of(0.0), self.grid.index_of(0.5), self.grid.index_of(1.0)):
            assert agg[i] == pytest.approx(delayed_aggregate(p, i, m)[0, 0], abs=1e-14)

    def test_running_average(self):
        g = TimeGrid.uniform(0.0, 1.0, 100)
        A = running_average_matrix(g)
        y = 2 * g.nodes + 1
        avg = A @ y
        assert avg[0] == 1.0
        assert np.allclose(avg[1:], g.nodes[1:] + 1, atol=1e-13)


class TestExpWeightedMass:
    @given(beta=st.floats(0, 50))
    def test_dirac(self, beta):
        assert exp_weighted_mass(DelayMeasure.dirac(0.1), beta) == pytest.approx(math.exp(0.1 * beta))

    def test_lebesgue_closed_forms(self):
        m = DelayMeasure.lebesgue(0.2)
        assert exp_weighted_mass(m, 0.0) == 0.2
        assert exp_weighted_mass(m, 5.0) == pytest.approx(0.2 * (math.e - 1), rel=1e-14)
        assert exp_weighted_mass(m, 5.0, "advanced") == exp_weighted_mass(m, 5.0, "delayed")

    def test_quadrature_oracle(self):
        from scipy.integrate import quad

        m = DelayMeasure.lebesgue(0.3)
        ref, _ = quad(lambda r: math.exp(-2.0 * r), -0.3, 0.0)
        assert exp_weighted_mass(m, 2.0) == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("m", [DelayMeasure.dirac(0.1), DelayMeasure.lebesgue(0.1),
                                   DelayMeasure.finite_atoms([(-0.02, 0.5), (-0.1, 0.25)])])
    def test_zero_rate_is_total_mass(self, m):
        assert exp_weighted_mass(m, 0.0) == pytest.approx(m.total_mass(), rel=1e-15)


class TestSplice:
    def test_zero_initial_segment(self):
        g = TimeGrid.uniform(-0.1, 1.0, 110, T=1.0)
        p = SampledProcess(g, np.ones((2, g.n_nodes, 1)))
        out = splice_boundary_path(p, lambda t: 0 * t, "initial")
        pre = g.nodes < -1e-12
        assert np.all(out.values[:, pre] == 0) and np.all(out.values[:, ~pre] == 1)

    def test_extends_grid_for_terminal(self):
        g = TimeGrid.uniform(0.0, 1.0, 100)
        p = SampledProcess(g, np.ones((2, g.n_nodes, 1)))
        out = splice_boundary_path(p, lambda t: 0 * t, "terminal", window=(1.0, 1.1))
        assert out.grid.t_end == pytest.approx(1.1)
        assert np.all(out.values[:, g.n_nodes:] == 0)

    def test_idempotent(self):
        g = TimeGrid.uniform(-0.1, 1.1, 120, T=1.0)
        p = SampledProcess(g, np.ones((2, g.n_nodes, 1)))
        once = splice_boundary_path(p, np.sin, "initial")
        twice = splice_boundary_path(once, np.sin, "initial")
        assert np.array_equal(once.values, twice.values)

    def test_overlap_rejected(self):
        g = TimeGrid.uniform(-0.1, 1.1, 120, T=1.0)
        p = SampledProcess.zeros(g, 1)
        with pytest.raises(BoundaryOverlapError):
            splice_boundary_path(p, np.sin, "initial", window=(-0.1, 0.2))
        with pytest.raises(BoundaryOverlapError):
            splice_boundary_path(p, np.sin, "terminal", window=(0.9, 1.1))

    def test_nonfinite_path_rejected(self):
        g = TimeGrid.uniform(-0.1, 1.0, 110, T=1.0)
        with pytest.raises(ValueError):
            splice_boundary_path(SampledProcess.zeros(g, 1), lambda t: np.where(t < -0.05, np.nan, 0.0), "initial")

    def test_values_read_only(self):
        p = SampledProcess.zeros(TimeGrid.uniform(0, 1, 4), 1)
        with pytest.raises(ValueError):
            p.values[0, 0, 0] = 1.0
