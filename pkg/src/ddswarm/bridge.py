"""Conversion between wavefunctions and swarms.

A swarm built from Psi carries the Born weights |Psi|^2 dx and the
phase-gradient speeds (hbar/m) grad(phi); the inverse map takes the modulus
from the density and the phase from the path integral of (m/hbar) v.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (DdsParams, Grid1D, PhysicalConstants, Swarm, UndefinedDensityError,
                   WaveField, density, total_weight)

PHASE_FLOOR = 1e-6
WEIGHT_FLOOR = 1e-12
MAX_PHASE_STEP = 0.9 * np.pi
NODE_TOLERANCE = 1e-6


class AliasingError(ValueError):
    """Phase changes by too much between neighbouring cells to be resolved."""


class UnsupportedTopologyError(ValueError):
    """A closed path was requested on a grid that has none."""


def phase_increments(psi: np.ndarray, axis: int = 0, periodic: bool = False) -> np.ndarray:
    """Wrapped phase difference between each cell and its successor along ``axis``."""
    nxt = np.roll(psi, -1, axis=axis)
    inc = np.angle(nxt * np.conj(psi))
    if not periodic:
        inc = np.delete(inc, -1, axis=axis)
    return inc


def _speeds_from_increments(inc: np.ndarray, valid: np.ndarray, n: int, periodic: bool,
                            dx: float, scale: float) -> np.ndarray:
    """Average the valid increments on either side of each cell (1-D)."""
    inc = np.where(valid, inc, 0.0)
    num = np.zeros(n)
    cnt = np.zeros(n)
    left = np.arange(inc.size)
    right = (left + 1) % n
    np.add.at(num, left, inc)
    np.add.at(cnt, left, valid)
    np.add.at(num, right, inc)
    np.add.at(cnt, right, valid)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(cnt > 0, num / cnt, 0.0)
    return scale * out / dx


def phase_speeds(psi: np.ndarray, grid: Grid1D, constants: PhysicalConstants,
                 phase_floor: float = PHASE_FLOOR, max_step: float = MAX_PHASE_STEP,
                 axis: int = 0) -> np.ndarray:
    """Speed (hbar/m) d(phi)/dx at every cell along ``axis`` of an n-dimensional field.

    Increments between cells whose densities fall below ``phase_floor`` times
    the peak are ignored, as are sign flips (increments within
    ``NODE_TOLERANCE`` of pi), which mark a node of a real amplitude and carry
    no current.  Any other increment larger than ``max_step`` is treated as
    aliasing and rejected.
    """
    psi = np.asarray(psi, dtype=complex)
    rho = np.abs(psi) ** 2
    peak = rho.max()
    ok = rho >= phase_floor * peak
    inc = phase_increments(psi, axis, grid.periodic)
    ok_next = np.roll(ok, -1, axis=axis)
    valid = ok & ok_next
    if not grid.periodic:
        valid = np.delete(valid, -1, axis=axis)
    valid = valid & (np.abs(np.abs(inc) - np.pi) > NODE_TOLERANCE)
    if np.any(np.abs(inc[valid]) > max_step):
        raise AliasingError("phase step between neighbouring cells exceeds the resolvable bound")
    scale = constants.hbar / constants.mass
    inc_m = np.moveaxis(inc, axis, -1)
    val_m = np.moveaxis(valid, axis, -1)
    lead = inc_m.shape[:-1]
    out = np.empty(lead + (grid.n_cells,))
    for idx in np.ndindex(*lead):
        out[idx] = _speeds_from_increments(inc_m[idx], val_m[idx], grid.n_cells,
                                           grid.periodic, grid.dx, scale)
    return np.moveaxis(out, -1, axis)


def swarm_from_wavefunction(psi: WaveField, total_weight: float, params: DdsParams,
                            constants: PhysicalConstants = PhysicalConstants(),
                            weight_floor: float = WEIGHT_FLOOR,
                            phase_floor: float = PHASE_FLOOR) -> Swarm:
    """One resident per cell with Born weights and phase-gradient speeds.

    In integer mode the ``total_weight`` samples are drawn from the Born
    distribution with the swarm's generator.
    """
    grid = psi.grid
    n2 = psi.norm2()
    if not n2 > 0:
        raise ValueError("cannot build a swarm from a zero wavefunction")
    mass = psi.density() * grid.dx / n2
    speeds = phase_speeds(psi.psi, grid, constants, phase_floor)
    rng = np.random.default_rng(params.rng_seed)
    if params.integer_mode:
        weights = rng.multinomial(int(round(total_weight)), mass / mass.sum()).astype(float)
    else:
        weights = mass * total_weight
        weights[mass < weight_floor * mass.max()] = 0.0
    speeds = np.where(weights > 0, speeds, 0.0)
    return Swarm(grid, constants, params, grid.centers, speeds, weights, rng=rng)


def cell_velocity(swarm: Swarm) -> np.ndarray:
    """Weight-averaged speed per cell (0 in empty cells)."""
    w = swarm.cell_weights()
    p = swarm.cell_momentum()
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(w > 0, p / w, 0.0)


@dataclass(frozen=True, eq=False)
class PhaseField:
    """Relative phase with a mask of cells reachable from the anchor.

    ``winding`` is the phase accumulated around a ring in units of 2 pi
    (``None`` off a ring); a nonzero value means the branch choice is
    ambiguous and is reported rather than resolved.
    """

    phi: np.ndarray
    defined: np.ndarray
    anchor: int
    winding: float | None = None


def phase_from_swarm(swarm: Swarm, anchor: int, phase_floor: float = PHASE_FLOOR,
                     constants: PhysicalConstants | None = None) -> PhaseField:
    """Trapezoid path integral of (m/hbar) v from the anchor cell.

    Cells cut off from the anchor by a cell below ``phase_floor`` times the
    peak density are left undefined (phase 0, mask False).
    """
    grid = swarm.grid
    if not 0 <= anchor < grid.n_cells:
        raise IndexError("anchor outside the grid")
    constants = constants or swarm.constants
    rho = density(swarm).rho
    ok = rho >= phase_floor * rho.max()
    if not ok[anchor]:
        raise ValueError("anchor cell lies below the density floor")
    v = cell_velocity(swarm) * constants.mass / constants.hbar
    n, dx = grid.n_cells, grid.dx
    phi = np.zeros(n)
    defined = np.zeros(n, bool)
    defined[anchor] = True
    for i in range(anchor + 1, n):
        if not ok[i]:
            break
        phi[i] = phi[i - 1] + 0.5 * (v[i - 1] + v[i]) * dx
        defined[i] = True
    for i in range(anchor - 1, -1, -1):
        if not ok[i]:
            break
        phi[i] = phi[i + 1] - 0.5 * (v[i + 1] + v[i]) * dx
        defined[i] = True
    winding = None
    if grid.periodic and ok.all():
        loop = np.sum(0.5 * (v + np.roll(v, -1)) * dx)
        winding = float(loop / (2 * np.pi))
    return PhaseField(phi, defined, anchor, winding)


def wavefunction_from_swarm(swarm: Swarm, anchor: int, phase_floor: float = PHASE_FLOOR,
                            return_quality: bool = False):
    """Psi = sqrt(rho) exp(i phi), normalised; undefined-phase cells get phase 0.

    With ``return_quality`` the boolean mask of cells with a defined phase is
    returned alongside the wavefunction.
    """
    if not total_weight(swarm) > 0:
        raise UndefinedDensityError("cannot restore a wavefunction from an empty swarm")
    rho = density(swarm).rho
    ph = phase_from_swarm(swarm, anchor, phase_floor)
    phi = np.where(ph.defined, ph.phi, 0.0)
    wf = WaveField.from_complex(swarm.grid, np.sqrt(rho) * np.exp(1j * phi)).normalized()
    return (wf, ph.defined) if return_quality else wf


def loop_integral(swarm: Swarm) -> float:
    """Closed-path integral of the swarm speed around a ring."""
    if not swarm.grid.periodic:
        raise UnsupportedTopologyError("closed paths exist only on a periodic grid")
    return float(np.sum(cell_velocity(swarm)) * swarm.grid.dx)


def loop_integral_drift(swarm_t0: Swarm, swarm_t1: Swarm, elapsed: float | None = None,
                        phase_floor: float = PHASE_FLOOR) -> float:
    """Rate of change of the ring integral of the swarm speed between two snapshots.

    ``elapsed`` defaults to the difference of the step counters recorded in the
    swarms' diagnostics times dt.
    """
    for s in (swarm_t0, swarm_t1):
        if not s.grid.periodic:
            raise UnsupportedTopologyError("closed paths exist only on a periodic grid")
        rho = density(s).rho
        if np.any(rho < phase_floor * rho.max()):
            raise ValueError("density falls below the floor on the loop")
    if elapsed is None:
        steps = swarm_t1.diagnostics.get("steps", 0) - swarm_t0.diagnostics.get("steps", 0)
        elapsed = steps * swarm_t1.params.dt
    if not elapsed > 0:
        return 0.0
    return (loop_integral(swarm_t1) - loop_integral(swarm_t0)) / elapsed
