"""Shared domain types: grid, wavefunction, potential, simplexes and swarms.

Weights are stored as float64 values that are integer multiples of a
power-of-two quantum, with every total below 2**53 quanta.  Sums of such
numbers are exact in any order, which is what makes weight conservation
exact rather than approximate.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

BOUNDARIES = ("wall", "mirror", "periodic", "open")


class DomainError(ValueError):
    """A position, barrier or index lies outside the simulated domain."""


class UndefinedDensityError(ValueError):
    """Density requested for a swarm carrying no weight."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centred grid on ``[x_min, x_max]``.

    ``boundary`` selects the closure used by both engines: ``"wall"`` (hard,
    elastically reflecting wall), ``"mirror"`` (zero-gradient reflecting
    closure), ``"periodic"`` (ring) or ``"open"`` (no walls; swarm members
    leaving the domain raise :class:`DomainError`).
    """

    x_min: float
    x_max: float
    n_cells: int
    boundary: str = "wall"

    def __post_init__(self):
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max)):
            raise ValueError("grid bounds must be finite")
        if self.x_max <= self.x_min:
            raise ValueError("x_max must exceed x_min")
        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            raise ValueError("n_cells must be an integer >= 2")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        object.__setattr__(self, "n_cells", int(self.n_cells))

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_cells) + 0.5) * self.dx

    def center(self, i: int) -> float:
        if not 0 <= i < self.n_cells:
            raise DomainError(f"cell index {i} outside [0, {self.n_cells})")
        return self.x_min + (i + 0.5) * self.dx

    def cell_index(self, x):
        """Index of the cell containing ``x`` (the right edge belongs to the last cell)."""
        xa = np.asarray(x, dtype=float)
        if np.any(~np.isfinite(xa)) or np.any(xa < self.x_min) or np.any(xa > self.x_max):
            raise DomainError("position outside the grid domain")
        idx = np.floor((xa - self.x_min) / self.dx).astype(np.int64)
        idx = np.clip(idx, 0, self.n_cells - 1)
        return int(idx) if idx.ndim == 0 else idx


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if not (self.hbar > 0 and self.mass > 0):
            raise ValueError("hbar and mass must be positive")

    def gamma(self, grid: Grid1D) -> float:
        """Nearest-neighbour coupling hbar / (2 m dx^2) of the lattice Laplacian."""
        return self.hbar / (2.0 * self.mass * grid.dx**2)


@dataclass(frozen=True, eq=False)
class WaveField:
    """Complex wavefunction sampled at cell centres, kept as real/imaginary channels."""

    grid: Grid1D
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.array(self.re, dtype=float)
        im = np.array(self.im, dtype=float)
        if re.shape != (self.grid.n_cells,) or im.shape != re.shape:
            raise ValueError("amplitude arrays must have one entry per cell")
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise ValueError("wavefunction amplitudes must be finite")
        re.flags.writeable = False
        im.flags.writeable = False
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_complex(cls, grid: Grid1D, psi) -> "WaveField":
        psi = np.asarray(psi, dtype=complex)
        return cls(grid, psi.real, psi.imag)

    @classmethod
    def from_function(cls, grid: Grid1D, f: Callable[[np.ndarray], np.ndarray],
                      normalize: bool = True) -> "WaveField":
        wf = cls.from_complex(grid, f(grid.centers))
        return wf.normalized() if normalize else wf

    @property
    def psi(self) -> np.ndarray:
        return self.re + 1j * self.im

    def density(self) -> np.ndarray:
        return self.re**2 + self.im**2

    def norm2(self) -> float:
        return float(np.sum(self.density()) * self.grid.dx)

    def normalized(self) -> "WaveField":
        n2 = self.norm2()
        if not n2 > 0:
            raise ValueError("cannot normalize a zero wavefunction")
        s = 1.0 / math.sqrt(n2)
        return WaveField(self.grid, self.re * s, self.im * s)


@dataclass(frozen=True)
class Barrier:
    center: float
    width: float
    height: float


@dataclass(frozen=True, eq=False)
class PotentialField:
    """Per-cell potential energy.

    ``v`` is the compiled total; ``base`` is the smooth part that produces
    forces, and ``step`` (``v - base``) is the piecewise-constant barrier
    profile that swarm members scatter off.
    """

    grid: Grid1D
    v: np.ndarray
    barriers: tuple = ()
    base: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        if v.shape != (self.grid.n_cells,) or not np.all(np.isfinite(v)):
            raise ValueError("potential must be finite with one entry per cell")
        base = np.zeros_like(v) if self.base is None else np.array(self.base, dtype=float)
        v.flags.writeable = False
        base.flags.writeable = False
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "barriers", tuple(self.barriers))

    @property
    def step(self) -> np.ndarray:
        return self.v - self.base

    @classmethod
    def zero(cls, grid: Grid1D) -> "PotentialField":
        return cls(grid, np.zeros(grid.n_cells))

    def gradient(self) -> np.ndarray:
        """Centred-difference gradient of the smooth part; one-sided at the ends."""
        b, dx = self.base, self.grid.dx
        g = np.empty_like(b)
        if self.grid.periodic:
            return (np.roll(b, -1) - np.roll(b, 1)) / (2 * dx)
        g[1:-1] = (b[2:] - b[:-2]) / (2 * dx)
        g[0] = (b[1] - b[0]) / dx
        g[-1] = (b[-1] - b[-2]) / dx
        return g


def _base_values(base, grid: Grid1D, params: dict | None) -> np.ndarray:
    x = grid.centers
    params = params or {}
    if base is None or (isinstance(base, str) and base == "zero"):
        return np.zeros_like(x)
    if callable(base):
        return np.broadcast_to(np.asarray(base(x), dtype=float), x.shape).copy()
    if isinstance(base, str):
        if base == "linear":
            return params.get("slope", 1.0) * (x - params.get("origin", 0.0))
        if base == "harmonic":
            x0 = params.get("center", 0.5 * (grid.x_min + grid.x_max))
            return 0.5 * params.get("k", 1.0) * (x - x0) ** 2
        raise ValueError(f"unknown base potential tag {base!r}")
    arr = np.asarray(base, dtype=float)
    if arr.shape != x.shape:
        raise ValueError("base potential array must have one entry per cell")
    return arr.copy()


def compile_potential(barriers: Iterable[Barrier] = (), base=None, grid: Grid1D | None = None,
                      base_params: dict | None = None) -> PotentialField:
    """Build a per-cell potential from a smooth base plus rectangular barriers.

    ``base`` is ``None``/``"zero"``, ``"linear"`` (params ``slope``, ``origin``),
    ``"harmonic"`` (params ``k``, ``center``), a callable of the cell centres or
    an array.  A cell belongs to a barrier when its centre lies in
    ``[center - width/2, center + width/2]``; overlapping barriers combine by
    pointwise maximum.
    """
    if grid is None:
        raise ValueError("a grid is required")
    barriers = tuple(barriers)
    x = grid.centers
    base_v = _base_values(base, grid, base_params)
    step = np.zeros_like(x)
    tol = 1e-9 * grid.dx
    for b in barriers:
        if not b.width > 0:
            raise ValueError("barrier width must be positive")
        if not grid.x_min <= b.center <= grid.x_max:
            raise DomainError(f"barrier centred at {b.center} lies outside the grid")
        inside = np.abs(x - b.center) <= 0.5 * b.width + tol
        step = np.where(inside, np.maximum(step, b.height), step)
    return PotentialField(grid, base_v + step, barriers, base_v)


@dataclass
class Simplex:
    position: float
    speed: float
    weight: float
    shift: float = 0.0
    internal_energy: float = 0.0


@dataclass(frozen=True)
class DdsParams:
    """Dynamic-diffusion parameters.

    ``a`` is the per-step explosion fraction sent each way, ``max_speed`` the
    thin-layer launch speed c.  ``waiting_mode`` switches residents from
    continuous flight to the internal-shift rule.
    """

    a: float
    max_speed: float
    dt: float
    integer_mode: bool = False
    rng_seed: int = 0
    waiting_mode: bool = False

    def __post_init__(self):
        if not 0 < self.a < 0.5:
            raise ValueError("explosion fraction a must lie in (0, 1/2)")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def reach(self, grid: Grid1D) -> float:
        """Thin-layer flight distance per step in cells."""
        return self.max_speed * self.dt / grid.dx


@dataclass(frozen=True, eq=False)
class DensityField:
    grid: Grid1D
    rho: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        if rho.shape != (self.grid.n_cells,):
            raise ValueError("density must have one entry per cell")
        if np.any(rho < 0):
            raise ValueError("density must be nonnegative")
        rho.flags.writeable = False
        object.__setattr__(self, "rho", rho)

    def masses(self) -> np.ndarray:
        return self.rho * self.grid.dx


def weight_quantum(total: float, integer_mode: bool = False) -> float:
    """Power-of-two weight unit leaving ``total`` below 2**52 quanta."""
    if integer_mode:
        return 1.0
    if not total > 0:
        return 1.0
    return 2.0 ** (math.ceil(math.log2(total)) - 52)


def quantize(w, quantum: float) -> np.ndarray:
    return np.round(np.asarray(w, dtype=float) / quantum) * quantum


class Swarm:
    """Weighted simplexes on a grid, stored column-wise.

    The arrays ``positions``, ``speeds``, ``weights``, ``shifts``,
    ``internal_energy`` and ``thin`` (member of the current thin layer) share
    one index.  ``rng`` is the run's generator and
    is shared (not copied) by the phase functions that return new swarms.
    """

    def __init__(self, grid: Grid1D, constants: PhysicalConstants, params: DdsParams,
                 positions, speeds, weights, shifts=None, internal_energy=None,
                 total_weight_initial: float | None = None, quantum: float | None = None,
                 rng: np.random.Generator | None = None, diagnostics: dict | None = None,
                 thin=None):
        self.grid = grid
        self.constants = constants
        self.params = params
        self.positions = np.array(positions, dtype=float).reshape(-1)
        n = self.positions.size
        self.speeds = np.array(speeds, dtype=float).reshape(-1)
        w = np.array(weights, dtype=float).reshape(-1)
        if self.speeds.size != n or w.size != n:
            raise ValueError("simplex arrays must have equal length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if quantum is None:
            quantum = weight_quantum(float(w.sum()), params.integer_mode)
        self.quantum = float(quantum)
        self.weights = quantize(w, self.quantum)
        self.shifts = np.zeros(n) if shifts is None else np.array(shifts, dtype=float).reshape(-1)
        self.internal_energy = (np.zeros(n) if internal_energy is None
                                else np.array(internal_energy, dtype=float).reshape(-1))
        self.thin = np.zeros(n, bool) if thin is None else np.array(thin, dtype=bool).reshape(-1)
        self.total_weight_initial = (float(self.weights.sum()) if total_weight_initial is None
                                     else float(total_weight_initial))
        self.rng = rng if rng is not None else np.random.default_rng(params.rng_seed)
        self.diagnostics = diagnostics if diagnostics is not None else {}

    @classmethod
    def from_simplexes(cls, grid: Grid1D, constants: PhysicalConstants, params: DdsParams,
                       simplexes: Sequence[Simplex], **kw) -> "Swarm":
        return cls(grid, constants, params,
                   [s.position for s in simplexes], [s.speed for s in simplexes],
                   [s.weight for s in simplexes], [s.shift for s in simplexes],
                   [s.internal_energy for s in simplexes], **kw)

    def __len__(self) -> int:
        return self.positions.size

    @property
    def simplexes(self) -> list[Simplex]:
        return [Simplex(float(p), float(v), float(w), float(s), float(e))
                for p, v, w, s, e in zip(self.positions, self.speeds, self.weights,
                                         self.shifts, self.internal_energy)]

    def with_arrays(self, **arrays) -> "Swarm":
        """New swarm sharing grid, params and rng, with some arrays replaced."""
        cols = dict(positions=self.positions, speeds=self.speeds, weights=self.weights,
                    shifts=self.shifts, internal_energy=self.internal_energy, thin=self.thin)
        cols.update(arrays)
        return Swarm(self.grid, self.constants, self.params, quantum=self.quantum,
                     total_weight_initial=self.total_weight_initial, rng=self.rng,
                     diagnostics=dict(self.diagnostics), **cols)

    def snapshot(self) -> "Swarm":
        """Deep copy, including the generator state."""
        return Swarm(self.grid, self.constants, self.params, self.positions.copy(),
                     self.speeds.copy(), self.weights.copy(), self.shifts.copy(),
                     self.internal_energy.copy(), self.total_weight_initial, self.quantum,
                     copy.deepcopy(self.rng), copy.deepcopy(self.diagnostics), self.thin.copy())

    def cell_indices(self) -> np.ndarray:
        return self.grid.cell_index(self.positions) if len(self) else np.zeros(0, np.int64)

    def cell_weights(self) -> np.ndarray:
        return np.bincount(self.cell_indices(), self.weights, self.grid.n_cells)

    def cell_momentum(self) -> np.ndarray:
        return np.bincount(self.cell_indices(), self.weights * self.speeds, self.grid.n_cells)

    def momentum(self) -> float:
        return float(self.constants.mass * np.sum(self.weights * self.speeds))

    def with_params(self, **changes) -> "Swarm":
        s = self.with_arrays()
        s.params = replace(self.params, **changes)
        return s


def total_weight(swarm: Swarm) -> float:
    return float(np.sum(swarm.weights)) if len(swarm) else 0.0


def density(swarm: Swarm) -> DensityField:
    """Per-cell density: cell weight / (dx * total weight)."""
    total = total_weight(swarm)
    if not total > 0:
        raise UndefinedDensityError("density of an empty swarm is undefined")
    return DensityField(swarm.grid, swarm.cell_weights() / (swarm.grid.dx * total))
