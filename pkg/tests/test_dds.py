import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddswarm.core import (Barrier, DdsParams, DomainError, Grid1D, PhysicalConstants, PotentialField,
                          Swarm, WaveField, compile_potential, total_weight)
from ddswarm.bridge import swarm_from_wavefunction
from ddswarm.dds import (A_CALIBRATION, dds_step, empirical_stream_change, explosion_phase,
                         flight_phase, intensity_params, make_params, measure_calibration,
                         ramp_swarm, rearrangement_phase, run)
from ddswarm.fd import stability_limit

C = PhysicalConstants()


def one(grid, x, v, w=1.0, **kw):
    p = DdsParams(**{"a": 2.0**-6, "max_speed": 10.0, "dt": 0.01, **kw})
    return Swarm(grid, C, p, [x], [v], [w])


class TestExplosion:
    def test_three_children(self):
        g = Grid1D(0, 1, 10)
        sw = explosion_phase(one(g, 0.55, 2.0))
        got = sorted(zip(sw.speeds, sw.weights))
        a = 2.0**-6
        assert got == [(2.0 - 10.0, a), (2.0, 1 - 2 * a), (2.0 + 10.0, a)]
        assert np.all(sw.positions == 0.55)
        assert sw.thin.sum() == 2

    def test_conserves_weight_and_momentum(self, grid):
        rng = np.random.default_rng(1)
        p = DdsParams(a=0.013, max_speed=50.0, dt=0.001)
        sw = Swarm(grid, C, p, grid.centers, rng.normal(size=grid.n_cells), rng.random(grid.n_cells))
        ex = explosion_phase(sw)
        assert total_weight(ex) == total_weight(sw)
        assert ex.momentum() == pytest.approx(sw.momentum(), rel=1e-12, abs=1e-12)

    def test_integer_mode_counts(self, grid):
        p = DdsParams(a=0.1, max_speed=50.0, dt=0.001, integer_mode=True, rng_seed=4)
        sw = Swarm(grid, C, p, grid.centers, np.zeros(grid.n_cells), np.full(grid.n_cells, 1000.0))
        ex = explosion_phase(sw)
        assert np.all(ex.weights == np.round(ex.weights))
        assert total_weight(ex) == total_weight(sw)
        thin = ex.weights[ex.thin].sum()
        expected = 2 * 0.1 * total_weight(sw)
        assert abs(thin - expected) < 4 * np.sqrt(expected)


class TestFlight:
    def test_free_motion(self):
        g = Grid1D(0, 1, 10)
        sw = flight_phase(one(g, 0.55, 2.0), PotentialField.zero(g))
        assert sw.positions[0] == pytest.approx(0.57)

    def test_wall_reflection_and_impulse(self):
        g = Grid1D(0, 1, 10)
        sw = flight_phase(one(g, 0.99, 2.0, w=0.5), PotentialField.zero(g))
        assert sw.positions[0] == pytest.approx(0.99)
        assert sw.speeds[0] == -2.0
        assert sw.diagnostics["flight"]["wall_impulse"] == pytest.approx(-2.0)

    def test_periodic_wrap(self):
        g = Grid1D(0, 1, 10, "periodic")
        sw = flight_phase(one(g, 0.99, 2.0), PotentialField.zero(g))
        assert sw.positions[0] == pytest.approx(0.01)
        assert sw.speeds[0] == 2.0

    def test_open_domain_escape(self):
        g = Grid1D(0, 1, 10, "open")
        with pytest.raises(DomainError):
            flight_phase(one(g, 0.99, 2.0), PotentialField.zero(g))

    def test_barrier_bounce(self):
        g = Grid1D(0, 1, 10)
        v = compile_potential([Barrier(0.65, 0.1, 10.0)], grid=g)
        sw = flight_phase(one(g, 0.59, 2.0), v)  # kinetic energy 2 < 10
        assert sw.speeds[0] == -2.0
        assert sw.positions[0] == pytest.approx(0.59)
        assert sw.diagnostics["flight"]["barrier_impulse"] == pytest.approx(-4.0)

    def test_barrier_pass_exchanges_energy(self):
        g = Grid1D(0, 1, 10)
        v = compile_potential([Barrier(0.65, 0.1, 1.0)], grid=g)
        sw = flight_phase(one(g, 0.59, 2.0), v)
        assert sw.speeds[0] == pytest.approx(np.sqrt(4.0 - 2.0))
        assert 0.6 < sw.positions[0] < 0.7

    def test_smooth_force_kick(self):
        g = Grid1D(0, 1, 10)
        v = compile_potential(base="linear", grid=g, base_params={"slope": 3.0})
        sw = flight_phase(one(g, 0.55, 0.0), v)
        assert sw.speeds[0] == pytest.approx(-3.0 * 0.01)


class TestRearrangement:
    def test_merge_conserves_momentum_and_stores_heat(self):
        g = Grid1D(0, 1, 10)
        p = DdsParams(a=0.01, max_speed=10.0, dt=0.01)
        sw = Swarm(g, C, p, [0.51, 0.58, 0.95], [1.0, -3.0, 0.5], [0.25, 0.75, 1.0])
        out = rearrangement_phase(sw)
        assert len(out) == 2
        i = int(np.argmin(np.abs(out.positions - 0.55)))
        assert out.positions[i] == pytest.approx(0.55)
        assert out.weights[i] == 1.0
        assert out.speeds[i] == pytest.approx(0.25 - 2.25)
        ke_before = 0.5 * (0.25 * 1.0 + 0.75 * 9.0)
        assert out.internal_energy[i] == pytest.approx(ke_before - 0.5 * 2.0**2)
        assert out.momentum() == pytest.approx(sw.momentum())


def random_swarm(seed, n=48, integer=False):
    g = Grid1D(0, 1, n)
    rng = np.random.default_rng(seed)
    p = make_params(g, C, 0.5 * stability_limit(g), integer_mode=integer, rng_seed=seed)
    w = rng.integers(0, 50, n).astype(float) if integer else rng.random(n)
    v = rng.normal(scale=0.1 * p.max_speed, size=n)
    return Swarm(g, C, p, g.centers, v, w)


class TestStep:
    @given(st.integers(0, 2**31 - 1), st.booleans())
    def test_exact_weight_conservation(self, seed, integer):
        sw = random_swarm(seed, integer=integer)
        v = compile_potential([Barrier(0.3, 0.1, 5e3)], base="harmonic", grid=sw.grid,
                              base_params={"k": 1e4})
        w0 = total_weight(sw)
        for _ in range(30):
            sw = dds_step(sw, v)
            assert total_weight(sw) == w0
            led = sw.diagnostics["ledger"]
            assert np.abs(led.residual).max() <= 1e-9 * (np.abs(led.momentum_before).max() + 1)

    def test_phases_compose_to_step(self):
        a = random_swarm(3)
        b = a.snapshot()
        v = compile_potential(base="linear", grid=a.grid, base_params={"slope": 100.0})
        a = dds_step(a, v)
        b = rearrangement_phase(flight_phase(explosion_phase(b), v))
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.speeds, b.speeds)

    def test_integer_mode_seeded_determinism(self):
        outs = [run(random_swarm(11, integer=True), PotentialField.zero(Grid1D(0, 1, 48)), 20)
                for _ in range(2)]
        np.testing.assert_array_equal(outs[0].weights, outs[1].weights)
        np.testing.assert_array_equal(outs[0].speeds, outs[1].speeds)
        assert np.all(outs[0].weights == np.round(outs[0].weights))

    def test_rejects_foreign_potential(self):
        sw = random_swarm(0)
        with pytest.raises(ValueError):
            dds_step(sw, PotentialField.zero(Grid1D(0, 1, 7)))

    def test_regime_violation_counted(self):
        g = Grid1D(0, 1, 10)
        sw = one(g, 0.55, 20.0)  # faster than the thin layer
        sw = dds_step(sw, PotentialField.zero(g))
        assert sw.diagnostics["violations"] >= 1

    def test_waiting_mode_hops_after_full_cell(self):
        g = Grid1D(0, 1, 10)
        p = DdsParams(a=2.0**-10, max_speed=10.0, dt=0.01, waiting_mode=True)
        sw = Swarm(g, C, p, [0.55], [3.0], [1.0])
        cells = []
        for _ in range(4):
            sw = dds_step(sw, PotentialField.zero(g))
            heavy = int(np.argmax(sw.weights))
            cells.append(g.cell_index(sw.positions[heavy]))
        # shift grows by 0.03 per step; the resident hops once it reaches dx = 0.1
        assert cells == [5, 5, 5, 6]


class TestStreamLaw:
    def test_calibration_constant(self):
        g = Grid1D(0, 1, 96)
        got = measure_calibration(g, C, 0.5 * stability_limit(g))
        assert got == pytest.approx(A_CALIBRATION, rel=0.02)

    def test_make_params_uses_reach(self, grid):
        p = make_params(grid, C, 0.5 * stability_limit(grid), reach=1.5)
        assert p.reach(grid) == pytest.approx(1.5)
        i_grad, _ = intensity_params(grid, C)
        assert p.a == pytest.approx(A_CALIBRATION * i_grad * p.dt / p.max_speed)

    def test_kick_term(self):
        g = Grid1D(0, 1, 64)
        p = make_params(g, C, 0.5 * stability_limit(g))
        sw = ramp_swarm(g, C, p, slope=0.0)
        v = compile_potential(base="linear", grid=g, base_params={"slope": 50.0})
        after = dds_step(sw, v)
        _, kappa = intensity_params(g, C)
        for b in range(5, 58):
            assert empirical_stream_change(sw, after, b) == pytest.approx(-kappa * 1.0 * 50.0 * p.dt,
                                                                          rel=0.1)

    def test_stream_change_border_range(self):
        sw = random_swarm(0)
        with pytest.raises(IndexError):
            empirical_stream_change(sw, sw, sw.grid.n_cells - 1)


def test_ground_state_swarm_starts_at_rest(grid):
    wf = WaveField.from_function(grid, lambda x: np.sin(np.pi * x))
    p = make_params(grid, C, 0.5 * stability_limit(grid))
    sw = swarm_from_wavefunction(wf, 1.0, p)
    assert np.all(sw.speeds == 0)
