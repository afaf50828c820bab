import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddswarm.core import (Barrier, DdsParams, DensityField, DomainError, Grid1D, PotentialField,
                          Simplex, Swarm, UndefinedDensityError, WaveField, compile_potential,
                          density, quantize, total_weight, weight_quantum)


def params(**kw):
    base = dict(a=0.01, max_speed=100.0, dt=0.01)
    base.update(kw)
    return DdsParams(**base)


class TestGrid:
    def test_spacing_and_centres(self):
        g = Grid1D(0.0, 1.0, 4)
        assert g.dx == 0.25
        np.testing.assert_allclose(g.centers, [0.125, 0.375, 0.625, 0.875])

    @pytest.mark.parametrize("args", [(1.0, 0.0, 4), (0.0, 1.0, 1), (0.0, np.inf, 4),
                                      (0.0, 1.0, 4.5)])
    def test_invalid_grids(self, args):
        with pytest.raises(ValueError):
            Grid1D(*args)

    def test_unknown_boundary(self):
        with pytest.raises(ValueError):
            Grid1D(0, 1, 8, boundary="sticky")

    def test_cell_index_edges(self):
        g = Grid1D(0.0, 1.0, 4)
        assert g.cell_index(0.0) == 0
        assert g.cell_index(0.25) == 1
        assert g.cell_index(1.0) == 3
        with pytest.raises(DomainError):
            g.cell_index(1.0001)
        with pytest.raises(DomainError):
            g.center(4)


class TestWaveField:
    def test_normalisation(self, grid):
        wf = WaveField.from_function(grid, lambda x: np.exp(1j * x) * (1 + x))
        assert wf.norm2() == pytest.approx(1.0)

    def test_zero_cannot_normalise(self, grid):
        with pytest.raises(ValueError):
            WaveField.from_complex(grid, np.zeros(grid.n_cells)).normalized()

    def test_rejects_non_finite_and_wrong_shape(self, grid):
        with pytest.raises(ValueError):
            WaveField(grid, np.full(grid.n_cells, np.nan), np.zeros(grid.n_cells))
        with pytest.raises(ValueError):
            WaveField(grid, np.zeros(3), np.zeros(3))

    def test_arrays_are_read_only(self, grid):
        wf = WaveField.from_function(grid, np.sin)
        with pytest.raises(ValueError):
            wf.re[0] = 1.0


class TestCompilePotential:
    def test_barrier_cells(self):
        g = Grid1D(0.0, 1.0, 10)
        v = compile_potential([Barrier(0.5, 0.2, 3.0)], grid=g)
        # centres 0.45 and 0.55 lie inside [0.4, 0.6]; 0.35 and 0.65 do not
        np.testing.assert_array_equal(np.nonzero(v.v)[0], [4, 5])
        assert np.all(v.v[[4, 5]] == 3.0)

    def test_overlap_takes_maximum(self):
        g = Grid1D(0.0, 1.0, 10)
        v = compile_potential([Barrier(0.45, 0.2, 1.0), Barrier(0.55, 0.2, 2.0)], grid=g)
        assert v.v[4] == 2.0 and v.v[5] == 2.0 and v.v[3] == 1.0 and v.v[6] == 2.0

    def test_errors(self):
        g = Grid1D(0.0, 1.0, 10)
        with pytest.raises(DomainError):
            compile_potential([Barrier(1.5, 0.1, 1.0)], grid=g)
        with pytest.raises(ValueError):
            compile_potential([Barrier(0.5, 0.0, 1.0)], grid=g)

    def test_base_and_step_split(self):
        g = Grid1D(0.0, 1.0, 10)
        v = compile_potential([Barrier(0.5, 0.2, 3.0)], base="linear", grid=g,
                              base_params={"slope": 2.0})
        np.testing.assert_allclose(v.base, 2.0 * g.centers)
        np.testing.assert_allclose(v.step[[4, 5]], 3.0)
        np.testing.assert_allclose(v.gradient()[1:-1], 2.0)

    def test_harmonic_base(self):
        g = Grid1D(-1.0, 1.0, 20)
        v = compile_potential(base="harmonic", grid=g, base_params={"k": 4.0})
        np.testing.assert_allclose(v.v, 2.0 * g.centers**2)


class TestWeights:
    @given(st.lists(st.floats(1e-9, 1e3), min_size=2, max_size=200), st.randoms())
    def test_quantised_sums_are_order_independent(self, ws, rnd):
        w = np.array(ws)
        q = weight_quantum(w.sum() * 2)
        wq = quantize(w, q)
        shuffled = list(wq)
        rnd.shuffle(shuffled)
        assert sum(shuffled) == wq.sum() == sum(sorted(shuffled))

    def test_integer_mode_quantum(self):
        assert weight_quantum(123.0, integer_mode=True) == 1.0


class TestSwarm:
    def test_from_simplexes_roundtrip(self, grid, constants):
        s = [Simplex(0.1, 1.0, 0.25), Simplex(0.9, -2.0, 0.75)]
        sw = Swarm.from_simplexes(grid, constants, params(), s)
        assert sw.simplexes == s
        assert total_weight(sw) == 1.0
        assert sw.momentum() == pytest.approx(0.25 - 1.5)

    def test_negative_weight_rejected(self, grid, constants):
        with pytest.raises(ValueError):
            Swarm(grid, constants, params(), [0.5], [0.0], [-1.0])

    def test_density_normalised(self, grid, constants):
        sw = Swarm(grid, constants, params(), [0.1, 0.1, 0.7], [0, 0, 0], [1.0, 2.0, 1.0])
        rho = density(sw)
        assert isinstance(rho, DensityField)
        assert rho.masses().sum() == pytest.approx(1.0)
        assert rho.masses()[grid.cell_index(0.1)] == pytest.approx(0.75)

    def test_empty_density_undefined(self, grid, constants):
        sw = Swarm(grid, constants, params(), [], [], [])
        with pytest.raises(UndefinedDensityError):
            density(sw)

    def test_snapshot_is_independent(self, grid, constants):
        sw = Swarm(grid, constants, params(), [0.5], [0.0], [1.0])
        snap = sw.snapshot()
        assert snap.rng.random() == sw.rng.random()
        snap.weights[0] = 5.0
        assert sw.weights[0] == 1.0


class TestParams:
    @pytest.mark.parametrize("kw", [dict(a=0.0), dict(a=0.5), dict(max_speed=0.0), dict(dt=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            params(**kw)

    def test_reach(self):
        g = Grid1D(0, 1, 10)
        assert params(max_speed=10.0, dt=0.01).reach(g) == pytest.approx(1.0)
