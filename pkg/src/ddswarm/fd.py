"""Explicit finite-difference Schrödinger integrator and detailed-stream diagnostics.

The lattice stream across the border between cells ``i`` and ``i+1`` is
reported left to right: positive values move probability into cell ``i+1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import Grid1D, PhysicalConstants, PotentialField, WaveField

DEFAULT_CONSTANTS = PhysicalConstants()


class StabilityError(RuntimeError):
    """The explicit scheme was asked to take a step it cannot take safely."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class FdScheme:
    """``mode="shifted"`` adds the constant -hbar^2/(m dx^2) to the potential,
    which removes the on-site term of the three-point Laplacian.

    ``update="simultaneous"`` advances real and imaginary parts together
    (forward Euler); ``"staggered"`` advances the real part first and then
    the imaginary part from the new real part.  The staggered form keeps a
    modified norm bounded and is the one to use past short horizons.
    """

    dt: float
    mode: str = "standard"
    stability_margin: float = 1.0
    update: str = "simultaneous"

    def __post_init__(self):
        if self.mode not in ("standard", "shifted"):
            raise ValueError("mode must be 'standard' or 'shifted'")
        if self.update not in ("simultaneous", "staggered"):
            raise ValueError("update must be 'simultaneous' or 'staggered'")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.stability_margin <= 1:
            raise ValueError("stability_margin must lie in (0, 1]")

    @classmethod
    def fraction_of_limit(cls, fraction: float, grid: Grid1D,
                          constants: PhysicalConstants = DEFAULT_CONSTANTS, **kw) -> "FdScheme":
        return cls(dt=fraction * stability_limit(grid, constants), **kw)


class Snapshot(NamedTuple):
    t: float
    psi: WaveField


def stability_limit(grid: Grid1D, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Heuristic step bound m dx^2 / (2 hbar).

    Forward Euler amplifies every mode by sqrt(1 + (E dt / hbar)^2), so this is
    a bound on the per-step growth of the stiffest lattice mode (E dt / hbar = 2
    at the bound), not a true stability region.
    """
    return grid.dx**2 * constants.mass / (2.0 * constants.hbar)


def _ghosts(a: np.ndarray, boundary: str):
    if boundary == "periodic":
        return a[-1], a[0]
    if boundary == "wall":
        return -a[0], -a[-1]
    if boundary == "mirror":
        return a[0], a[-1]
    return 0.0 * a[0], 0.0 * a[-1]


def neighbour_sum(a: np.ndarray, boundary: str) -> np.ndarray:
    left, right = _ghosts(a, boundary)
    out = np.empty_like(a)
    out[1:-1] = a[2:] + a[:-2]
    out[0] = a[1] + left
    out[-1] = a[-2] + right
    return out


def potential_shift(grid: Grid1D, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Constant that cancels the on-site Laplacian term in one dimension."""
    return -constants.hbar**2 / (constants.mass * grid.dx**2)


def _rhs(psi: np.ndarray, onsite: np.ndarray, gamma: float, boundary: str) -> np.ndarray:
    return 1j * gamma * neighbour_sum(psi, boundary) - 1j * onsite * psi


def _apply_h(a: np.ndarray, onsite: np.ndarray, gamma: float, boundary: str) -> np.ndarray:
    """Lattice Hamiltonian divided by hbar, applied to a real channel."""
    return onsite * a - gamma * neighbour_sum(a, boundary)


def step_explicit(psi: WaveField, v: PotentialField, scheme: FdScheme,
                  constants: PhysicalConstants = DEFAULT_CONSTANTS,
                  dt: float | None = None) -> WaveField:
    """One explicit step of the real/imaginary split Schrödinger system.

    ``dt`` overrides the scheme step (used for a shortened final step); it may
    not exceed the scheme's own step.
    """
    grid = psi.grid
    if v.grid != grid:
        raise ValueError("wavefunction and potential must share a grid")
    h = scheme.dt if dt is None else dt
    limit = scheme.stability_margin * stability_limit(grid, constants)
    if h > limit * (1 + 1e-12) or h > scheme.dt * (1 + 1e-12):
        raise StabilityError(f"dt={h:.3e} exceeds the allowed {limit:.3e}")
    gamma = constants.gamma(grid)
    onsite = v.v / constants.hbar + 2.0 * gamma
    if scheme.mode == "shifted":
        onsite = onsite + potential_shift(grid, constants) / constants.hbar
    with np.errstate(over="ignore", invalid="ignore"):
        if scheme.update == "staggered":
            re = psi.re + h * _apply_h(psi.im, onsite, gamma, grid.boundary)
            im = psi.im - h * _apply_h(re, onsite, gamma, grid.boundary)
        else:
            new = psi.psi + h * _rhs(psi.psi, onsite, gamma, grid.boundary)
            re, im = new.real, new.imag
    if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
        raise StabilityError("amplitudes became non-finite")
    return WaveField(grid, re, im)


def evolve(psi0: WaveField, v: PotentialField, scheme: FdScheme, t_final: float,
           snap_every: int = 1, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> list[Snapshot]:
    """Integrate to ``t_final``; snapshot every ``snap_every`` steps and at the end."""
    if t_final < 0:
        raise ValueError("t_final must be nonnegative")
    if snap_every < 1:
        raise ValueError("snap_every must be >= 1")
    out = [Snapshot(0.0, psi0)]
    if t_final == 0:
        return out
    n_steps = max(1, math.ceil(t_final / scheme.dt - 1e-9))
    psi, t = psi0, 0.0
    for k in range(1, n_steps + 1):
        h = min(scheme.dt, t_final - t) if k == n_steps else scheme.dt
        try:
            psi = step_explicit(psi, v, scheme, constants, dt=h)
        except StabilityError as exc:
            raise StabilityError(str(exc), step=k) from exc
        t = t_final if k == n_steps else k * scheme.dt
        if k % snap_every == 0 or k == n_steps:
            out.append(Snapshot(t, psi))
    return out


def _border_pairs(grid: Grid1D):
    n = grid.n_cells
    if grid.periodic:
        return np.arange(n), (np.arange(n) + 1) % n
    return np.arange(n - 1), np.arange(1, n)


def border_streams(psi: WaveField, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Left-to-right stream through every interior border (and the seam of a ring)."""
    g = constants.gamma(psi.grid)
    l, r = _border_pairs(psi.grid)
    return 2.0 * g * (psi.re[l] * psi.im[r] - psi.im[l] * psi.re[r])


def _check_border(grid: Grid1D, i: int) -> None:
    hi = grid.n_cells if grid.periodic else grid.n_cells - 1
    if not 0 <= i < hi:
        raise IndexError(f"border index {i} outside [0, {hi})")


def detailed_stream(psi: WaveField, i: int,
                    constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Stream from cell ``i`` into cell ``i+1``: 2 gamma (re_i im_j - im_i re_j).

    This is the rate at which the border alone raises the density of cell
    ``i+1``; the same border lowers the density of cell ``i`` at the same rate.
    """
    _check_border(psi.grid, i)
    j = (i + 1) % psi.grid.n_cells
    g = constants.gamma(psi.grid)
    return float(2.0 * g * (psi.re[i] * psi.im[j] - psi.im[i] * psi.re[j]))


def continuity_rate(psi: WaveField, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Per-cell d(rho)/dt implied by the signed border streams (inflow minus outflow)."""
    grid = psi.grid
    s = border_streams(psi, constants)
    rate = np.zeros(grid.n_cells)
    l, r = _border_pairs(grid)
    np.add.at(rate, r, s)
    np.subtract.at(rate, l, s)
    return rate


def _gradient_terms(psi: WaveField, v: PotentialField, i: int, constants: PhysicalConstants):
    _check_border(psi.grid, i)
    j = (i + 1) % psi.grid.n_cells
    g = constants.gamma(psi.grid)
    rho = psi.density()
    dv = (v.v[j] - v.v[i]) / constants.hbar
    return g, i, j, rho, dv


def stream_derivative(psi: WaveField, v: PotentialField, i: int,
                      constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Leading-order rate of change of the stream through border ``i``.

    Equals -I grad(rho) - (kappa / hbar) rho grad(V) with I = hbar^2/(2 m^2 dx^3)
    and kappa = hbar/(m dx); the gradients are border differences over dx and
    rho is taken in the upstream cell ``i``.
    """
    g, i, j, rho, dv = _gradient_terms(psi, v, i, constants)
    return float(-2.0 * g * g * (rho[j] - rho[i]) - 2.0 * g * dv * rho[i])


def stream_remainder(psi: WaveField, v: PotentialField, i: int,
                     constants: PhysicalConstants = DEFAULT_CONSTANTS) -> float:
    """Overlap correction dropped by :func:`stream_derivative` (vanishes for constant V)."""
    g, i, j, rho, dv = _gradient_terms(psi, v, i, constants)
    overlap = psi.re[i] * psi.re[j] + psi.im[i] * psi.im[j]
    return float(-2.0 * g * dv * (overlap - rho[i]))


def exchange_step(psi: WaveField, v: PotentialField, i: int, dt: float,
                  constants: PhysicalConstants = DEFAULT_CONSTANTS) -> WaveField:
    """Euler step of the two-cell exchange across border ``i`` alone.

    Cells ``i`` and ``i+1`` are coupled only to each other (on-site term
    removed by the potential shift); all other cells are left untouched.  This
    is the dynamics under which the stream-rate law is derived.
    """
    _check_border(psi.grid, i)
    j = (i + 1) % psi.grid.n_cells
    g = constants.gamma(psi.grid)
    p = psi.psi.copy()
    vi, vj = v.v[i] / constants.hbar, v.v[j] / constants.hbar
    di = 1j * g * p[j] - 1j * vi * p[i]
    dj = 1j * g * p[i] - 1j * vj * p[j]
    p[i] += dt * di
    p[j] += dt * dj
    return WaveField.from_complex(psi.grid, p)
