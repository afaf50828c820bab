"""Dynamic diffusion swarm stepper: explosion, flight and rearrangement.

The phase kernels work on ``(K, n)`` coordinate arrays so the same code
drives the one-particle :class:`~ddswarm.core.Swarm` (``n == 1``) and the
cortege swarms of :mod:`ddswarm.multiparticle`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (DdsParams, DomainError, Grid1D, PhysicalConstants, PotentialField, Swarm,
                   total_weight)

#: Calibration factor ``a * c / (I * dt)`` measured with the linear-ramp
#: oracle (see :func:`measure_calibration`); nearest-neighbour exchange gives 1/2.
A_CALIBRATION = 0.5


def intensity_params(grid: Grid1D, constants: PhysicalConstants) -> tuple[float, float]:
    """Density-gradient intensity I = hbar^2/(2 m^2 dx^3) and potential intensity kappa = hbar/(m dx)."""
    dx = grid.dx
    i_grad = constants.hbar**2 / (2.0 * constants.mass**2 * dx**3)
    kappa = constants.hbar / (constants.mass * dx)
    return i_grad, kappa


def explosion_fraction(grid: Grid1D, constants: PhysicalConstants, dt: float, max_speed: float,
                       calibration: float = A_CALIBRATION) -> float:
    """Explosion fraction that makes the thin layer reproduce -I grad(rho) per step."""
    i_grad, _ = intensity_params(grid, constants)
    return calibration * i_grad * dt / max_speed


def make_params(grid: Grid1D, constants: PhysicalConstants, dt: float, reach: float = 1.0,
                calibration: float = A_CALIBRATION, **kw) -> DdsParams:
    """Parameters with ``max_speed * dt = reach * dx`` and the calibrated ``a``."""
    c = reach * grid.dx / dt
    return DdsParams(a=explosion_fraction(grid, constants, dt, c, calibration),
                     max_speed=c, dt=dt, **kw)


# --------------------------------------------------------------------------
# kernels on (K, n) clouds


@dataclass
class Cloud:
    pos: np.ndarray          # (K, n)
    vel: np.ndarray          # (K, n)
    w: np.ndarray            # (K,)
    sh: np.ndarray           # (K, n) internal shift magnitude along each axis
    eint: np.ndarray         # (K,)
    thin: np.ndarray         # (K,) bool

    @property
    def k(self) -> int:
        return self.w.size

    def momentum(self) -> np.ndarray:
        return (self.w[:, None] * self.vel).sum(axis=0)


@dataclass
class StepLedger:
    """Per-step momentum and regime bookkeeping (momenta in mass * speed units)."""

    momentum_before: np.ndarray
    momentum_after: np.ndarray = None
    kicks: np.ndarray = None
    wall_impulse: np.ndarray = None
    barrier_impulse: np.ndarray = None
    explosion_residual: np.ndarray = None
    rearrangement_residual: np.ndarray = None
    thin_fraction: float = 0.0
    speed_ratio: float = 0.0
    violations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def residual(self) -> np.ndarray:
        return (self.momentum_after - self.momentum_before - self.kicks
                - self.wall_impulse - self.barrier_impulse)

    def as_dict(self) -> dict:
        def f(a):
            return [float(x) for x in np.atleast_1d(a)]
        return {"momentum_before": f(self.momentum_before), "momentum_after": f(self.momentum_after),
                "kicks": f(self.kicks), "wall_impulse": f(self.wall_impulse),
                "barrier_impulse": f(self.barrier_impulse), "residual": f(self.residual),
                "thin_fraction": self.thin_fraction, "speed_ratio": self.speed_ratio,
                "violations": self.violations}


def _stochastic_round(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo = np.floor(x)
    return lo + (rng.random(x.shape) < (x - lo))


def explode(cloud: Cloud, a: float, c: float, quantum: float, integer_mode: bool,
            rng: np.random.Generator) -> Cloud:
    """Split every member into 2n thin-layer children (fraction a each, launched
    at +-c along one axis) and a resident keeping the rest.

    Every axis thus sees the same thin layer as a one-particle swarm, which
    keeps the per-axis stream law and the marginals of product states intact.
    """
    k, n = cloud.pos.shape
    q = cloud.w / quantum
    if integer_mode:
        # equal counts at +c and -c keep the explosion momentum-neutral
        per_axis = _stochastic_round(np.repeat(a * q[:, None], n, axis=1), rng)
        per_axis = np.minimum(per_axis, np.floor(q / (2 * n))[:, None])
        counts = np.repeat(per_axis, 2, axis=1)
    else:
        each = np.minimum(np.round(q * a), np.floor(q / (2 * n)))
        counts = np.repeat(each[:, None], 2 * n, axis=1)
    middle = q - counts.sum(axis=1)
    blocks_w, blocks_v = [], []
    for j in range(n):
        for sgn in (-1.0, 1.0):
            v = cloud.vel.copy()
            v[:, j] += sgn * c
            blocks_v.append(v)
            blocks_w.append(counts[:, 2 * j + (sgn > 0)])
    blocks_v.append(cloud.vel.copy())
    blocks_w.append(middle)
    nb = 2 * n + 1
    thin = np.concatenate([np.ones(2 * n * k, bool), np.zeros(k, bool)])
    zeros_e = np.zeros(2 * n * k)
    return Cloud(pos=np.tile(cloud.pos, (nb, 1)), vel=np.concatenate(blocks_v),
                 w=np.concatenate(blocks_w) * quantum,
                 sh=np.concatenate([np.zeros((2 * n * k, n)), cloud.sh]),
                 eint=np.concatenate([zeros_e, cloud.eint]), thin=thin)


def _cross(cell, v, grid: Grid1D, step: np.ndarray, mass: float):
    """Resolve crossing of the face ahead of each member.

    Returns the new cell, new speed, and masks for wall and barrier
    reflections.  Members climbing a barrier step with less kinetic energy
    than the step height bounce back; others pass and exchange kinetic for
    potential energy.
    """
    n = grid.n_cells
    direction = np.where(v > 0, 1, -1)
    nb = cell + direction
    out = (nb < 0) | (nb >= n)
    if grid.boundary == "open" and np.any(out):
        raise DomainError("swarm member escaped an open domain")
    if grid.periodic:
        nb = nb % n
        out = np.zeros_like(out)
    nb_safe = np.clip(nb, 0, n - 1)
    dv = np.where(out, 0.0, step[nb_safe] - step[cell])
    ke = 0.5 * mass * v * v
    bounce = (~out) & (dv > 0) & (ke < dv)
    wall = out
    passes = ~(bounce | wall)
    v2 = np.maximum(v * v - 2.0 * np.where(passes, dv, 0.0) / mass, 0.0)
    new_v = np.where(passes, direction * np.sqrt(v2), -v)
    new_cell = np.where(passes, nb_safe, cell)
    return new_cell, new_v, wall, bounce


def fly_axis(x: np.ndarray, v: np.ndarray, dt: float, grid: Grid1D, step: np.ndarray,
             mass: float):
    """Straight flight of duration ``dt`` along one axis with face scattering.

    Returns new positions, speeds, and per-member speed changes from wall and
    barrier reflections.
    """
    x = x.copy()
    v = v.copy()
    v0 = v.copy()
    dv_wall = np.zeros_like(v)
    cell = grid.cell_index(x) if x.size else np.zeros(0, np.int64)
    t_rem = np.full(x.shape, float(dt))
    active = (v != 0) & (t_rem > 0)
    dx = grid.dx
    while np.any(active):
        idx = np.nonzero(active)[0]
        vi, ci, xi = v[idx], cell[idx], x[idx]
        face = grid.x_min + (ci + (vi > 0)) * dx
        tf = (face - xi) / vi
        finish = tf >= t_rem[idx]
        fi = idx[finish]
        x[fi] = x[fi] + v[fi] * t_rem[fi]
        t_rem[fi] = 0.0
        ci_idx = idx[~finish]
        if ci_idx.size:
            t_rem[ci_idx] -= tf[~finish]
            x[ci_idx] = face[~finish]
            before = v[ci_idx].copy()
            new_cell, new_v, wall, _ = _cross(cell[ci_idx], before, grid, step, mass)
            if grid.periodic:
                wrapped_left = (before < 0) & (cell[ci_idx] == 0)
                wrapped_right = (before > 0) & (cell[ci_idx] == grid.n_cells - 1)
                x[ci_idx[wrapped_left]] = grid.x_max
                x[ci_idx[wrapped_right]] = grid.x_min
            dv_wall[ci_idx] += np.where(wall, new_v - before, 0.0)
            cell[ci_idx] = new_cell
            v[ci_idx] = new_v
        active = (v != 0) & (t_rem > 0)
    np.clip(x, grid.x_min, grid.x_max, out=x)
    dv_barrier = (v - v0) - dv_wall
    return x, v, dv_wall, dv_barrier


def hop_axis(x: np.ndarray, v: np.ndarray, sh: np.ndarray, dt: float, grid: Grid1D,
             step: np.ndarray, mass: float):
    """Internal-shift rule for residents: accumulate |v| dt and move one cell
    in the direction of motion each time the shift reaches dx."""
    x = x.copy()
    v = v.copy()
    sh = sh + np.abs(v) * dt
    dv_wall = np.zeros_like(v)
    dv_barrier = np.zeros_like(v)
    cell = grid.cell_index(x) if x.size else np.zeros(0, np.int64)
    due = (sh >= grid.dx) & (v != 0)
    while np.any(due):
        idx = np.nonzero(due)[0]
        before = v[idx].copy()
        new_cell, new_v, wall, bounce = _cross(cell[idx], before, grid, step, mass)
        moved = ~(wall | bounce)
        dv_wall[idx] += np.where(wall, new_v - before, 0.0)
        dv_barrier[idx] += np.where(wall, 0.0, new_v - before)
        cell[idx] = new_cell
        v[idx] = new_v
        sh[idx] = np.where(moved, sh[idx] - grid.dx, 0.0)
        due = (sh >= grid.dx) & (v != 0)
    x = grid.x_min + (cell + 0.5) * grid.dx
    return x, v, sh, dv_wall, dv_barrier


def kick(cloud: Cloud, force_per_mass: Callable[[np.ndarray], np.ndarray], dt: float) -> np.ndarray:
    """Add the potential kick to every member; returns the per-member speed change."""
    dv = force_per_mass(cloud.pos) * dt
    cloud.vel = cloud.vel + dv
    return dv


def fly(cloud: Cloud, dt: float, grid: Grid1D, steps: Sequence[np.ndarray], mass: float,
        waiting_mode: bool):
    """Advance every axis independently; returns summed wall and barrier impulses."""
    k, n = cloud.pos.shape
    wall_imp = np.zeros(n)
    barrier_imp = np.zeros(n)
    pos, vel, sh = cloud.pos.copy(), cloud.vel.copy(), cloud.sh.copy()
    fliers = cloud.thin if waiting_mode else np.ones(k, bool)
    for j in range(n):
        xf, vf, dw, db = fly_axis(pos[fliers, j], vel[fliers, j], dt, grid, steps[j], mass)
        pos[fliers, j], vel[fliers, j] = xf, vf
        wall_imp[j] += mass * np.sum(cloud.w[fliers] * dw)
        barrier_imp[j] += mass * np.sum(cloud.w[fliers] * db)
        if waiting_mode:
            res = ~fliers
            xr, vr, sr, dw, db = hop_axis(pos[res, j], vel[res, j], sh[res, j], dt, grid,
                                          steps[j], mass)
            pos[res, j], vel[res, j], sh[res, j] = xr, vr, sr
            wall_imp[j] += mass * np.sum(cloud.w[res] * dw)
            barrier_imp[j] += mass * np.sum(cloud.w[res] * db)
    cloud.pos, cloud.vel, cloud.sh = pos, vel, sh
    return wall_imp, barrier_imp


def cell_keys(pos: np.ndarray, grid: Grid1D) -> np.ndarray:
    """Flattened n-dimensional cell index of each member (row-major)."""
    idx = grid.cell_index(pos) if pos.size else np.zeros(pos.shape, np.int64)
    idx = np.asarray(idx).reshape(pos.shape)
    key = np.zeros(pos.shape[0], np.int64)
    for j in range(pos.shape[1]):
        key = key * grid.n_cells + idx[:, j]
    return key


def key_to_cells(keys: np.ndarray, n: int, grid: Grid1D) -> np.ndarray:
    out = np.empty((keys.size, n), np.int64)
    rest = keys.copy()
    for j in range(n - 1, -1, -1):
        out[:, j] = rest % grid.n_cells
        rest //= grid.n_cells
    return out


def rearrange(cloud: Cloud, grid: Grid1D, mass: float, waiting_mode: bool) -> Cloud:
    """Merge all members sharing an n-dimensional cell into one resident at its centre.

    Weight is summed, speed is the weight-averaged speed (momentum is
    conserved), and the lost kinetic energy moves into ``eint``.
    """
    k, n = cloud.pos.shape
    keep = cloud.w > 0
    pos, vel, w = cloud.pos[keep], cloud.vel[keep], cloud.w[keep]
    keys = cell_keys(pos, grid)
    uniq, inv = np.unique(keys, return_inverse=True)
    m = uniq.size
    wsum = np.bincount(inv, w, m)
    vbar = np.empty((m, n))
    ke_in = np.bincount(inv, 0.5 * w * np.sum(vel * vel, axis=1), m)
    for j in range(n):
        vbar[:, j] = np.bincount(inv, w * vel[:, j], m) / wsum
    deficit = np.maximum(ke_in - 0.5 * wsum * np.sum(vbar * vbar, axis=1), 0.0)
    eint = np.bincount(inv, cloud.eint[keep], m) + mass * deficit
    sh = np.zeros((m, n))
    if waiting_mode:
        for j in range(n):
            signed = np.bincount(inv, w * cloud.sh[keep, j] * np.sign(vel[:, j]), m) / wsum
            sh[:, j] = np.clip(signed * np.sign(vbar[:, j]), 0.0, np.nextafter(grid.dx, 0))
    cells = key_to_cells(uniq, n, grid)
    new_pos = grid.x_min + (cells + 0.5) * grid.dx
    return Cloud(pos=new_pos, vel=vbar, w=wsum, sh=sh, eint=eint, thin=np.zeros(m, bool))


def regime_stats(cloud: Cloud, c: float) -> tuple[float, int]:
    """Weighted mean resident speed over c, and the count of residents at or above c."""
    speed = np.sqrt(np.sum(cloud.vel**2, axis=1))
    total = cloud.w.sum()
    ratio = float(np.sum(cloud.w * speed) / total / c) if total > 0 else 0.0
    return ratio, int(np.sum((speed >= c) & (cloud.w > 0)))


def cloud_step(cloud: Cloud, params: DdsParams, grid: Grid1D, steps: Sequence[np.ndarray],
               force_per_mass, mass: float, quantum: float, rng: np.random.Generator):
    """Explosion, flight and rearrangement on a cloud; returns the new cloud and its ledger."""
    ledger = StepLedger(momentum_before=mass * cloud.momentum())
    exploded = explode(cloud, params.a, params.max_speed, quantum, params.integer_mode, rng)
    ledger.explosion_residual = mass * exploded.momentum() - ledger.momentum_before
    total = exploded.w.sum()
    ledger.thin_fraction = float(exploded.w[exploded.thin].sum() / total) if total > 0 else 0.0
    dv = kick(exploded, force_per_mass, params.dt)
    ledger.kicks = mass * (exploded.w[:, None] * dv).sum(axis=0)
    ledger.wall_impulse, ledger.barrier_impulse = fly(exploded, params.dt, grid, steps, mass,
                                                      params.waiting_mode)
    before_merge = mass * exploded.momentum()
    merged = rearrange(exploded, grid, mass, params.waiting_mode)
    ledger.momentum_after = mass * merged.momentum()
    ledger.rearrangement_residual = ledger.momentum_after - before_merge
    ledger.speed_ratio, ledger.violations = regime_stats(merged, params.max_speed)
    return merged, ledger


# --------------------------------------------------------------------------
# one-particle swarm API


def _to_cloud(swarm: Swarm) -> Cloud:
    return Cloud(pos=swarm.positions[:, None].copy(), vel=swarm.speeds[:, None].copy(),
                 w=swarm.weights.copy(), sh=swarm.shifts[:, None].copy(),
                 eint=swarm.internal_energy.copy(), thin=swarm.thin.copy())


def _from_cloud(swarm: Swarm, cloud: Cloud) -> Swarm:
    return swarm.with_arrays(positions=cloud.pos[:, 0], speeds=cloud.vel[:, 0], weights=cloud.w,
                             shifts=cloud.sh[:, 0], internal_energy=cloud.eint, thin=cloud.thin)


def _force_1d(v: PotentialField, mass: float):
    grad = v.gradient()
    grid = v.grid

    def f(pos):
        return -grad[grid.cell_index(pos[:, 0])][:, None] / mass if pos.size else np.zeros_like(pos)
    return f


def _check_potential(swarm: Swarm, v: PotentialField) -> None:
    if v.grid != swarm.grid:
        raise ValueError("potential must be compiled on the swarm's grid")


def explosion_phase(swarm: Swarm) -> Swarm:
    """Replace each simplex by (a w, v - c), (a w, v + c), ((1 - 2a) w, v) at the same place."""
    p = swarm.params
    cloud = explode(_to_cloud(swarm), p.a, p.max_speed, swarm.quantum, p.integer_mode, swarm.rng)
    return _from_cloud(swarm, cloud)


def flight_phase(swarm: Swarm, v: PotentialField) -> Swarm:
    """Potential kick, then straight flight with wall and barrier scattering.

    In waiting mode only thin-layer members fly; residents follow the
    internal-shift rule.  The impulses are stored in ``diagnostics["flight"]``.
    """
    _check_potential(swarm, v)
    c = swarm.constants
    cloud = _to_cloud(swarm)
    dv = kick(cloud, _force_1d(v, c.mass), swarm.params.dt)
    wall, barrier = fly(cloud, swarm.params.dt, swarm.grid, [v.step], c.mass,
                        swarm.params.waiting_mode)
    out = _from_cloud(swarm, cloud)
    out.diagnostics["flight"] = {"kicks": float(c.mass * np.sum(cloud.w * dv[:, 0])),
                                 "wall_impulse": float(wall[0]),
                                 "barrier_impulse": float(barrier[0])}
    return out


def rearrangement_phase(swarm: Swarm) -> Swarm:
    """Merge simplexes cell by cell into residents at the cell centres."""
    merged = rearrange(_to_cloud(swarm), swarm.grid, swarm.constants.mass,
                       swarm.params.waiting_mode)
    return _from_cloud(swarm, merged)


def dds_step(swarm: Swarm, v: PotentialField) -> Swarm:
    """One explosion / flight / rearrangement cycle.

    The momentum ledger of the step is left in ``diagnostics["ledger"]`` and
    a running count of non-relativistic-regime violations in
    ``diagnostics["violations"]``.
    """
    _check_potential(swarm, v)
    c = swarm.constants
    merged, ledger = cloud_step(_to_cloud(swarm), swarm.params, swarm.grid, [v.step],
                                _force_1d(v, c.mass), c.mass, swarm.quantum, swarm.rng)
    out = _from_cloud(swarm, merged)
    out.diagnostics["ledger"] = ledger
    out.diagnostics["violations"] = swarm.diagnostics.get("violations", 0) + ledger.violations
    out.diagnostics["steps"] = swarm.diagnostics.get("steps", 0) + 1
    return out


def run(swarm: Swarm, v: PotentialField, n_steps: int) -> Swarm:
    for _ in range(n_steps):
        swarm = dds_step(swarm, v)
    return swarm


def cell_streams(swarm: Swarm) -> np.ndarray:
    """Per-cell stream rho * v / dx with rho normalised to unit total weight."""
    total = total_weight(swarm)
    return swarm.cell_momentum() / (total * swarm.grid.dx**2)


def empirical_stream_change(before: Swarm, after: Swarm, border: int) -> float:
    """Change of the liquid stream at a border over one step.

    The border stream is the mean of the two adjacent cell streams; the
    result compares directly with ``(-I grad(rho) - kappa rho grad(V)) dt``.
    """
    if before.grid != after.grid:
        raise ValueError("swarms live on different grids")
    grid = before.grid
    hi = grid.n_cells if grid.periodic else grid.n_cells - 1
    if not 0 <= border < hi:
        raise IndexError(f"border index {border} outside [0, {hi})")
    j = (border + 1) % grid.n_cells
    pb, pa = cell_streams(before), cell_streams(after)
    return float(0.5 * ((pa[border] + pa[j]) - (pb[border] + pb[j])))


def ramp_swarm(grid: Grid1D, constants: PhysicalConstants, params: DdsParams, slope: float,
               offset: float = 1.0, total: float = 1.0) -> Swarm:
    """Resident swarm at rest with cell weights offset + slope * (x - x_mid), normalised."""
    x = grid.centers
    w = offset + slope * (x - 0.5 * (grid.x_min + grid.x_max))
    if np.any(w < 0):
        raise ValueError("ramp becomes negative on the grid")
    w = w / w.sum() * total
    return Swarm(grid, constants, params, x, np.zeros_like(x), w)


def measure_calibration(grid: Grid1D, constants: PhysicalConstants, dt: float,
                        reach: float = 1.0, slope: float = 0.5, trial_a: float = 0.01) -> float:
    """Measure ``a * c / (I dt)`` that makes the swarm's stream change equal -I grad(rho) dt.

    Runs one step on a linear density ramp at rest with a trial fraction and
    fits the interior stream changes against the ramp gradient.
    """
    c = reach * grid.dx / dt
    params = DdsParams(a=trial_a, max_speed=c, dt=dt)
    sw = ramp_swarm(grid, constants, params, slope)
    after = dds_step(sw, PotentialField.zero(grid))
    rho = sw.cell_weights() / (sw.weights.sum() * grid.dx)
    borders = range(2, grid.n_cells - 3)
    grad = np.array([(rho[b + 1] - rho[b]) / grid.dx for b in borders])
    dp = np.array([empirical_stream_change(sw, after, b) for b in borders])
    i_trial = -np.dot(dp, grad) / np.dot(grad, grad) / dt
    i_grad, _ = intensity_params(grid, constants)
    a_needed = trial_a * i_grad / i_trial
    return a_needed * c / (i_grad * dt)
