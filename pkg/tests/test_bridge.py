import numpy as np
import pytest

from ddswarm.bridge import (AliasingError, UnsupportedTopologyError, cell_velocity,
                            loop_integral, loop_integral_drift, phase_from_swarm, phase_speeds,
                            swarm_from_wavefunction, wavefunction_from_swarm)
from ddswarm.core import (Grid1D, PhysicalConstants, PotentialField, Swarm, UndefinedDensityError,
                          WaveField, compile_potential)
from ddswarm.dds import dds_step, make_params, run
from ddswarm.fd import FdScheme, evolve, stability_limit

from conftest import smooth_random_state

C = PhysicalConstants()


def params(grid, **kw):
    return make_params(grid, C, 0.5 * stability_limit(grid), **kw)


def phase_error(psi_true, psi_rec, mask):
    d = np.angle(psi_rec * np.conj(psi_true))
    d = d - np.angle(np.exp(1j * d[mask]).mean())
    d = np.angle(np.exp(1j * d))
    return float(np.sqrt(np.mean(d[mask] ** 2)))


def test_plane_wave_speed():
    g = Grid1D(0, 1, 64, "periodic")
    k = 2 * np.pi * 4
    wf = WaveField.from_function(g, lambda x: np.exp(1j * k * x))
    np.testing.assert_allclose(phase_speeds(wf.psi, g, C), k * C.hbar / C.mass, rtol=1e-12)


def test_aliasing_rejected():
    g = Grid1D(0, 1, 16, "periodic")
    wf = WaveField.from_function(g, lambda x: np.exp(1j * 2 * np.pi * 7.5 * x))
    with pytest.raises(AliasingError):
        phase_speeds(wf.psi, g, C)


def test_real_nodes_carry_no_speed():
    g = Grid1D(0, 1, 64)
    wf = WaveField.from_function(g, lambda x: np.sin(3 * np.pi * x))
    assert np.all(phase_speeds(wf.psi, g, C) == 0)


def test_round_trip_weighted(grid):
    rng = np.random.default_rng(0)
    for _ in range(20):
        wf = smooth_random_state(grid, rng)
        sw = swarm_from_wavefunction(wf, 1.0, params(grid))
        rec, defined = wavefunction_from_swarm(sw, int(np.argmax(wf.density())),
                                               return_quality=True)
        np.testing.assert_allclose(np.abs(rec.psi), np.abs(wf.psi), atol=1e-12)
        mask = wf.density() > 1e-3 * wf.density().max()
        assert defined[mask].all()
        assert phase_error(wf.psi, rec.psi, mask) < 0.02


def test_round_trip_integer_modulus_within_sampling(grid):
    rng = np.random.default_rng(1)
    wf = smooth_random_state(grid, rng)
    n = 200_000
    sw = swarm_from_wavefunction(wf, n, params(grid, integer_mode=True, rng_seed=5))
    assert sw.weights.sum() == n
    p = wf.density() * grid.dx
    counts = sw.cell_weights()
    assert np.all(np.abs(counts - n * p) <= 5 * np.sqrt(n * p * (1 - p)) + 1)


def test_phase_undefined_across_gap():
    g = Grid1D(0, 1, 32)
    amp = np.exp(1j * 3 * g.centers)
    amp[16] = 0.0
    sw = swarm_from_wavefunction(WaveField.from_complex(g, amp), 1.0, params(g))
    ph = phase_from_swarm(sw, anchor=4)
    assert ph.defined[:16].all() and not ph.defined[16:].any()
    assert ph.winding is None


def test_anchor_validation():
    g = Grid1D(0, 1, 32)
    amp = np.ones(32)
    amp[3] = 0
    sw = swarm_from_wavefunction(WaveField.from_complex(g, amp), 1.0, params(g))
    with pytest.raises(IndexError):
        phase_from_swarm(sw, anchor=40)
    with pytest.raises(ValueError):
        phase_from_swarm(sw, anchor=3)


def test_ring_winding_reported():
    g = Grid1D(0, 1, 64, "periodic")
    wf = WaveField.from_function(g, lambda x: np.exp(2j * np.pi * 2 * x))
    sw = swarm_from_wavefunction(wf, 1.0, params(g))
    assert phase_from_swarm(sw, 0).winding == pytest.approx(2.0)
    assert loop_integral(sw) == pytest.approx(4 * np.pi)


def test_empty_swarm_has_no_wavefunction(grid):
    sw = Swarm(grid, C, params(grid), [], [], [])
    with pytest.raises(UndefinedDensityError):
        wavefunction_from_swarm(sw, 0)


class TestLoopDrift:
    def test_static_swarm(self):
        g = Grid1D(0, 1, 32, "periodic")
        sw = swarm_from_wavefunction(WaveField.from_complex(g, np.ones(32)), 1.0, params(g))
        assert loop_integral_drift(sw, sw.snapshot()) == 0.0

    def test_uniform_current_is_conserved(self):
        g = Grid1D(0, 1, 32, "periodic")
        wf = WaveField.from_function(g, lambda x: np.exp(2j * np.pi * x))
        sw0 = swarm_from_wavefunction(wf, 1.0, params(g))
        sw1 = run(sw0.snapshot(), PotentialField.zero(g), 50)
        drift = loop_integral_drift(sw0, sw1)
        assert abs(drift) <= 1e-9 * loop_integral(sw0) / (50 * sw0.params.dt)

    def test_requires_ring(self, grid):
        sw = swarm_from_wavefunction(WaveField.from_complex(grid, np.ones(grid.n_cells)), 1.0,
                                     params(grid))
        with pytest.raises(UnsupportedTopologyError):
            loop_integral_drift(sw, sw)

    def test_density_floor_on_loop(self):
        g = Grid1D(0, 1, 32, "periodic")
        amp = np.ones(32)
        amp[5] = 0
        sw = swarm_from_wavefunction(WaveField.from_complex(g, amp), 1.0, params(g))
        with pytest.raises(ValueError):
            loop_integral_drift(sw, sw)


def test_gaussian_packet_speed_at_centre():
    g = Grid1D(0, 1, 128)
    k0 = 40.0
    wf = WaveField.from_function(g, lambda x: np.exp(-(x - 0.5) ** 2 / (4 * 0.05**2) + 1j * k0 * x))
    sw = swarm_from_wavefunction(wf, 1.0, params(g))
    centre = int(np.argmin(np.abs(g.centers - 0.5)))
    assert sw.speeds[centre] == pytest.approx(C.hbar * k0 / C.mass, rel=0.01)


def test_restored_two_packet_state_evolves_like_original():
    g = Grid1D(0, 1, 128)
    x, k0 = g.centers, 40.0
    amp = (np.exp(-(x - 0.25) ** 2 / (4 * 0.05**2) + 1j * k0 * x)
           + np.exp(-(x - 0.75) ** 2 / (4 * 0.05**2) - 1j * k0 * x))
    wf = WaveField.from_complex(g, amp).normalized()
    rec = wavefunction_from_swarm(swarm_from_wavefunction(wf, 1.0, params(g)),
                                  int(np.argmax(wf.density())))
    scheme = FdScheme.fraction_of_limit(0.1, g, update="staggered")
    a = evolve(wf, PotentialField.zero(g), scheme, 0.005)[-1].psi
    b = evolve(rec, PotentialField.zero(g), scheme, 0.005)[-1].psi
    assert np.abs(a.density() / a.norm2() - b.density() / b.norm2()).sum() * g.dx < 0.05


def test_ring_integral_drift_small_under_evolution():
    g = Grid1D(0, 1, 64, "periodic")
    p = params(g)
    wf = WaveField.from_function(g, lambda x: np.sqrt(1 + 0.3 * np.cos(2 * np.pi * x))
                                 * np.exp(1j * (6 * np.pi * x + 0.5 * np.sin(2 * np.pi * x))))
    v = compile_potential(base=lambda x: 50 * np.cos(2 * np.pi * x), grid=g)
    s0 = swarm_from_wavefunction(wf, 1.0, p)
    s1 = s0
    for _ in range(200):
        s1 = dds_step(s1, v)
    horizon = 200 * p.dt
    ref = np.sum(np.abs(cell_velocity(s0))) * g.dx / horizon
    assert abs(loop_integral_drift(s0, s1, horizon)) < 1e-2 * ref
