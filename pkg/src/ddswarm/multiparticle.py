"""Cortege swarms for n particles on a shared 1-D grid per particle.

A cortege is one sample of the whole n-particle system: a tuple of n
positions and n speeds with a weight.  The one-particle explosion / flight /
rearrangement cycle is lifted to n-dimensional cells; only occupied cells
are ever materialised.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .bridge import phase_speeds
from .core import (DdsParams, Grid1D, PhysicalConstants, PotentialField, Swarm, WaveField,
                   weight_quantum)
from .dds import Cloud, cell_keys, cloud_step
from .fd import DEFAULT_CONSTANTS, StabilityError, stability_limit

Interaction = Callable[[np.ndarray, np.ndarray], np.ndarray]

#: Memory ceiling for the exact n-dimensional oracle.
ORACLE_MEMORY_LIMIT = 512 * 2**20


class InfeasibleError(RuntimeError):
    """The exact oracle would not fit the configured memory budget."""


@dataclass
class Cortege:
    positions: tuple
    speeds: tuple
    weight: float
    thin_layer: bool = False


class CortegeSwarm:
    """``m`` corteges of ``n`` particle samples (stored as weighted records).

    ``m`` is the total cortege weight, fixed for the swarm's lifetime.  In
    integer mode each record's weight counts whole corteges that currently
    share a cell.
    """

    def __init__(self, n: int, grid: Grid1D, params: DdsParams, positions, speeds, weights,
                 constants: PhysicalConstants = DEFAULT_CONSTANTS, rng=None, quantum=None,
                 shifts=None, internal_energy=None, thin=None, m: float | None = None):
        self.n = int(n)
        self.grid = grid
        self.params = params
        self.constants = constants
        self.positions = np.array(positions, dtype=float).reshape(-1, self.n)
        self.speeds = np.array(speeds, dtype=float).reshape(-1, self.n)
        w = np.array(weights, dtype=float).reshape(-1)
        if self.positions.shape[0] != w.size or self.speeds.shape != self.positions.shape:
            raise ValueError("cortege arrays must agree in length and particle count")
        self.quantum = float(quantum if quantum is not None
                             else weight_quantum(float(w.sum()), params.integer_mode))
        self.weights = np.round(w / self.quantum) * self.quantum
        k = w.size
        self.shifts = np.zeros((k, self.n)) if shifts is None else np.array(shifts, float).reshape(k, self.n)
        self.internal_energy = np.zeros(k) if internal_energy is None else np.array(internal_energy, float)
        self.thin = np.zeros(k, bool) if thin is None else np.array(thin, bool)
        self.rng = rng if rng is not None else np.random.default_rng(params.rng_seed)
        self.m = float(self.weights.sum()) if m is None else float(m)
        self.diagnostics: dict = {}

    @classmethod
    def from_swarm(cls, swarm: Swarm) -> "CortegeSwarm":
        """n = 1 view of a one-particle swarm (generator state copied)."""
        return cls(1, swarm.grid, swarm.params, swarm.positions, swarm.speeds, swarm.weights,
                   swarm.constants, copy.deepcopy(swarm.rng), swarm.quantum,
                   swarm.shifts, swarm.internal_energy, swarm.thin, swarm.total_weight_initial)

    def __len__(self) -> int:
        return self.weights.size

    @property
    def corteges(self) -> list[Cortege]:
        return [Cortege(tuple(map(float, p)), tuple(map(float, v)), float(w), bool(t))
                for p, v, w, t in zip(self.positions, self.speeds, self.weights, self.thin)]

    def total_weight(self) -> float:
        return float(self.weights.sum())

    def cloud(self) -> Cloud:
        return Cloud(self.positions.copy(), self.speeds.copy(), self.weights.copy(),
                     self.shifts.copy(), self.internal_energy.copy(), self.thin.copy())

    def with_cloud(self, cloud: Cloud) -> "CortegeSwarm":
        out = CortegeSwarm(self.n, self.grid, self.params, cloud.pos, cloud.vel, cloud.w,
                           self.constants, self.rng, self.quantum, cloud.sh, cloud.eint,
                           cloud.thin, self.m)
        out.diagnostics = dict(self.diagnostics)
        return out

    def marginal(self, j: int) -> np.ndarray:
        """Density of particle ``j`` per unit length (integrates to 1)."""
        idx = self.grid.cell_index(self.positions[:, j])
        w = np.bincount(idx, self.weights, self.grid.n_cells)
        return w / (w.sum() * self.grid.dx)

    def joint_masses(self) -> dict:
        """Probability mass per occupied n-dimensional cell, keyed by cell tuple."""
        keys = cell_keys(self.positions, self.grid)
        uniq, inv = np.unique(keys, return_inverse=True)
        mass = np.bincount(inv, self.weights, uniq.size) / self.weights.sum()
        s = self.grid.n_cells
        out = {}
        for key, val in zip(uniq, mass):
            cell = []
            for _ in range(self.n):
                cell.append(int(key % s))
                key //= s
            out[tuple(reversed(cell))] = float(val)
        return out


def cortege_density(swarm: CortegeSwarm, region: Sequence[tuple[int, int]]) -> float:
    """Fraction of cortege weight inside a box of cells.

    ``region`` gives one ``(start, stop)`` cell range per particle, half-open.
    """
    if len(region) != swarm.n:
        raise ValueError("region needs one cell range per particle")
    inside = np.ones(len(swarm), bool)
    for j, (lo, hi) in enumerate(region):
        if not 0 <= lo <= hi <= swarm.grid.n_cells:
            raise ValueError("region extends outside the grid")
        idx = swarm.grid.cell_index(swarm.positions[:, j])
        inside &= (idx >= lo) & (idx < hi)
    total = swarm.weights.sum()
    return float(swarm.weights[inside].sum() / total) if total > 0 else 0.0


def _atoms(swarm: Swarm, m: int | None) -> tuple[np.ndarray, np.ndarray]:
    if swarm.params.integer_mode:
        counts = swarm.weights.astype(np.int64)
    else:
        if m is None:
            raise ValueError("weighted swarms need an explicit atom count m")
        share = swarm.weights / swarm.weights.sum() * m
        counts = np.floor(share).astype(np.int64)
        short = int(m - counts.sum())
        if short:
            order = np.argsort(-(share - counts), kind="stable")
            counts[order[:short]] += 1
    return np.repeat(swarm.positions, counts), np.repeat(swarm.speeds, counts)


def build_product_state(single: Sequence[Swarm], m: int | None = None, seed: int = 0,
                        params: DdsParams | None = None) -> CortegeSwarm:
    """Pair one atom per particle into each cortege, uniformly without replacement.

    Integer-mode swarms contribute their samples as atoms; weighted swarms are
    apportioned to ``m`` equal atoms by largest remainder.
    """
    if not single:
        raise ValueError("need at least one particle")
    atoms = [_atoms(s, m) for s in single]
    sizes = {a[0].size for a in atoms}
    if len(sizes) != 1:
        raise ValueError(f"atom counts differ between particles: {sorted(sizes)}")
    count = sizes.pop()
    rng = np.random.default_rng(seed)
    pos = np.empty((count, len(single)))
    vel = np.empty((count, len(single)))
    for j, (p, v) in enumerate(atoms):
        perm = rng.permutation(count) if j else np.arange(count)
        pos[:, j], vel[:, j] = p[perm], v[perm]
    base = single[0]
    p = params or base.params
    return CortegeSwarm(len(single), base.grid, p, pos, vel, np.ones(count), base.constants,
                        rng=np.random.default_rng(p.rng_seed), quantum=1.0)


def build_entangled_state(amplitudes, m: float, grid: Grid1D, params: DdsParams,
                          constants: PhysicalConstants = DEFAULT_CONSTANTS,
                          seed: int | None = None) -> CortegeSwarm:
    """Corteges distributed by |Phi|^2 over the n-dimensional grid.

    Weighted mode puts the exact mass of every occupied cell into one
    cortege record; integer mode draws ``m`` corteges multinomially.  Speeds
    follow the phase gradient along each particle's axis.
    """
    amp = np.asarray(amplitudes, dtype=complex)
    n = amp.ndim
    if any(s != grid.n_cells for s in amp.shape):
        raise ValueError("amplitudes must have n_cells entries along every axis")
    prob = np.abs(amp) ** 2
    if not prob.sum() > 0:
        raise ValueError("zero-norm amplitudes")
    if m < 1:
        raise ValueError("m must be at least 1")
    prob = prob / prob.sum()
    speeds = np.stack([phase_speeds(amp, grid, constants, axis=j) for j in range(n)], axis=-1)
    rng = np.random.default_rng(params.rng_seed if seed is None else seed)
    if params.integer_mode:
        counts = rng.multinomial(int(round(m)), prob.ravel()).astype(float)
    else:
        counts = prob.ravel() * m
    occ = np.nonzero(counts > 0)[0]
    cells = np.stack(np.unravel_index(occ, amp.shape), axis=-1)
    pos = grid.x_min + (cells + 0.5) * grid.dx
    vel = speeds.reshape(-1, n)[occ]
    return CortegeSwarm(n, grid, params, pos, vel, counts[occ], constants, rng=rng)


def _force(grid: Grid1D, potentials: Sequence[PotentialField], interaction: Interaction | None,
           mass: float):
    grads = [p.gradient() for p in potentials]
    h = 1e-3 * grid.dx

    def f(pos):
        out = np.empty_like(pos)
        for j in range(pos.shape[1]):
            out[:, j] = -grads[j][grid.cell_index(pos[:, j])] / mass
            if interaction is not None:
                for k in range(pos.shape[1]):
                    if k != j:
                        dv = (interaction(pos[:, j] + h, pos[:, k])
                              - interaction(pos[:, j] - h, pos[:, k])) / (2 * h)
                        out[:, j] -= dv / mass
        return out
    return f


def multiparticle_step(swarm: CortegeSwarm, potentials: Sequence[PotentialField],
                       interaction: Interaction | None = None) -> CortegeSwarm:
    """One n-dimensional explosion / flight / rearrangement cycle.

    Each cortege launches fraction a of its weight at +c and at -c along every
    particle axis;
    flight applies per-particle kicks from the external and pairwise
    potentials; corteges sharing an n-dimensional cell merge with the
    componentwise weighted-mean speed.
    """
    if len(potentials) != swarm.n:
        raise ValueError("need one potential per particle")
    if not 2 * swarm.n * swarm.params.a < 1:
        raise ValueError("explosion fraction too large: 2 n a must stay below 1")
    for p in potentials:
        if p.grid != swarm.grid:
            raise ValueError("potentials must live on the swarm grid")
    mass = swarm.constants.mass
    merged, ledger = cloud_step(swarm.cloud(), swarm.params, swarm.grid,
                                [p.step for p in potentials],
                                _force(swarm.grid, potentials, interaction, mass),
                                mass, swarm.quantum, swarm.rng)
    out = swarm.with_cloud(merged)
    out.diagnostics["ledger"] = ledger
    out.diagnostics["steps"] = swarm.diagnostics.get("steps", 0) + 1
    return out


# --------------------------------------------------------------------------
# exact oracle on the n-dimensional grid


def oracle_memory(n: int, s: int) -> int:
    """Bytes used by the n-dimensional oracle (about eight complex work arrays)."""
    return 8 * 16 * s**n


def _h_nd(psi: np.ndarray, v: np.ndarray, gamma: float, hbar: float, boundary: str) -> np.ndarray:
    """n-particle lattice Hamiltonian divided by hbar."""
    nb = np.zeros_like(psi)
    for ax in range(psi.ndim):
        fwd = np.roll(psi, -1, axis=ax)
        bwd = np.roll(psi, 1, axis=ax)
        if boundary != "periodic":
            first = [slice(None)] * psi.ndim
            last = [slice(None)] * psi.ndim
            first[ax], last[ax] = 0, -1
            sign = {"wall": -1.0, "mirror": 1.0, "open": 0.0}[boundary]
            bwd[tuple(first)] = sign * psi[tuple(first)]
            fwd[tuple(last)] = sign * psi[tuple(last)]
        nb += fwd + bwd - 2.0 * psi
    return (v / hbar) * psi - gamma * nb


def fd_step_nd(psi: np.ndarray, v: np.ndarray, gamma: float, dt: float, hbar: float,
               boundary: str) -> np.ndarray:
    """Staggered step (real part first, then imaginary part) of the n-particle lattice equation."""
    re = psi.real + dt * _h_nd(psi.imag, v, gamma, hbar, boundary)
    im = psi.imag - dt * _h_nd(re, v, gamma, hbar, boundary)
    return re + 1j * im


def exact_marginals(psi0: np.ndarray, grid: Grid1D, potentials: Sequence[PotentialField],
                    interaction: Interaction | None, times: Sequence[float],
                    constants: PhysicalConstants = DEFAULT_CONSTANTS,
                    dt_fraction: float = 0.1,
                    memory_limit: int = ORACLE_MEMORY_LIMIT) -> list[list[np.ndarray]]:
    """Marginal densities of the exact lattice evolution at each requested time.

    The step is ``dt_fraction`` of the one-particle bound divided by n, since
    the stiffest n-particle mode is n times stiffer.
    """
    n, s = psi0.ndim, grid.n_cells
    need = oracle_memory(n, s)
    if need > memory_limit:
        raise InfeasibleError(f"exact oracle for n={n}, s={s} needs ~{need / 2**20:.0f} MiB "
                              f"(limit {memory_limit / 2**20:.0f} MiB)")
    x = grid.centers
    v = np.zeros(psi0.shape)
    for j, p in enumerate(potentials):
        shape = [1] * n
        shape[j] = s
        v = v + p.v.reshape(shape)
    if interaction is not None:
        grids = np.meshgrid(*([x] * n), indexing="ij")
        for j in range(n):
            for k in range(j + 1, n):
                v = v + interaction(grids[j], grids[k])
    gamma = constants.gamma(grid)
    dt = dt_fraction * stability_limit(grid, constants) / n
    psi = np.asarray(psi0, dtype=complex)
    out, t = [], 0.0
    for target in times:
        while t < target - 1e-15:
            h = min(dt, target - t)
            psi = fd_step_nd(psi, v, gamma, h, constants.hbar, grid.boundary)
            t += h
        if not np.all(np.isfinite(psi)):
            raise StabilityError("n-dimensional oracle diverged")
        rho = np.abs(psi) ** 2
        rho = rho / (rho.sum() * grid.dx**n)
        margs = []
        for j in range(n):
            axes = tuple(a for a in range(n) if a != j)
            margs.append(rho.sum(axis=axes) * grid.dx ** (n - 1) if axes else rho)
        out.append(margs)
    return out


@dataclass
class DivergenceCurve:
    times: np.ndarray
    divergence: np.ndarray
    n: int
    m: float
    seed: int
    occupancy: np.ndarray      # occupied n-dimensional cells per snapshot


def gaussian_amplitudes(grid: Grid1D, n: int, center: float | None = None,
                        sigma: float | None = None, k0: float = 0.0) -> np.ndarray:
    """Product of identical 1-D Gaussian packets, one per particle."""
    x = grid.centers
    c = 0.5 * (grid.x_min + grid.x_max) if center is None else center
    sig = grid.length / 8 if sigma is None else sigma
    g = np.exp(-((x - c) ** 2) / (4 * sig**2) + 1j * k0 * x)
    amp = g
    for _ in range(n - 1):
        amp = np.multiply.outer(amp, g)
    return amp


def decoherence_divergence(n: int, m: int, grid: Grid1D, params: DdsParams, horizon: float,
                           seed: int = 0, amplitudes=None, potentials=None,
                           interaction: Interaction | None = None, snapshots: int = 4,
                           constants: PhysicalConstants = DEFAULT_CONSTANTS) -> DivergenceCurve:
    """Mean per-particle L1 gap between the swarm marginals and the exact ones over time.

    Defaults to a product of centred Gaussians (sigma = L/8) in a box with no
    external or pairwise potential.
    """
    amp = gaussian_amplitudes(grid, n) if amplitudes is None else np.asarray(amplitudes)
    if amp.ndim != n:
        raise ValueError("amplitudes must have one axis per particle")
    pots = potentials or [PotentialField.zero(grid)] * n
    n_steps = max(1, int(round(horizon / params.dt)))
    marks = sorted({int(round(k * n_steps / snapshots)) for k in range(1, snapshots + 1)})
    times = [k * params.dt for k in marks]
    exact = exact_marginals(amp, grid, pots, interaction, times, constants)
    p = DdsParams(**{**params.__dict__, "rng_seed": seed})
    swarm = build_entangled_state(amp, m, grid, p, constants, seed=seed)
    div, occ = [], []
    step = 0
    for k, ref in zip(marks, exact):
        while step < k:
            swarm = multiparticle_step(swarm, pots, interaction)
            step += 1
        gaps = [np.abs(swarm.marginal(j) - ref[j]).sum() * grid.dx for j in range(n)]
        div.append(float(np.mean(gaps)))
        occ.append(len(swarm))
    return DivergenceCurve(np.array(times), np.array(div), n, float(m), seed, np.array(occ))
