"""Scenario runner: both engines from one declarative config, metrics and persisted output.

A run directory holds one long-format data CSV per simulated state, one
metrics CSV per state, optional scenario tables and a ``manifest.json``
listing every file with its SHA-256 checksum.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np
import yaml
from scipy.linalg import eigh_tridiagonal
from scipy.signal import find_peaks

from . import __version__
from .bridge import cell_velocity, swarm_from_wavefunction
from .core import (Barrier, DdsParams, DensityField, Grid1D, PhysicalConstants, PotentialField,
                   Swarm, WaveField, compile_potential, density, total_weight)
from .dds import A_CALIBRATION, dds_step, explosion_fraction
from .fd import FdScheme, stability_limit, step_explicit

SCHEMA_VERSION = "1"

SCENARIOS = {
    "gaussian_dispersion": "free spreading of a centred Gaussian packet at rest",
    "ground_vs_modulus": "stability metric M of the well ground state against the linear modulus function",
    "two_packet_interference": "two Gaussian packets with opposite momenta colliding at the centre",
    "double_well": "tunnelling of a left-localised state between two wells",
}

ENGINES = ("dds", "fd", "both")

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scenario"],
    "properties": {
        "scenario": {"enum": list(SCENARIOS)},
        "engine": {"enum": list(ENGINES)},
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "x_min": {"type": "number"}, "x_max": {"type": "number"},
                "n_cells": {"type": "integer", "minimum": 8},
                "boundary": {"enum": ["wall", "mirror", "periodic", "open"]},
            },
        },
        "constants": {
            "type": "object", "additionalProperties": False,
            "properties": {"hbar": {"type": "number", "exclusiveMinimum": 0},
                           "mass": {"type": "number", "exclusiveMinimum": 0}},
        },
        "dds": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "dt_fraction": {"type": "number", "exclusiveMinimum": 0},
                "reach": {"type": "number"},
                "a": {"type": ["number", "null"]},
                "calibration": {"type": "number", "exclusiveMinimum": 0},
                "integer_mode": {"type": "boolean"},
                "samples": {"type": "integer", "minimum": 1},
                "waiting_mode": {"type": "boolean"},
            },
        },
        "fd": {
            "type": "object", "additionalProperties": False,
            "properties": {"dt_fraction": {"type": "number", "exclusiveMinimum": 0},
                           "mode": {"enum": ["standard", "shifted"]},
                           "update": {"enum": ["simultaneous", "staggered"]}},
        },
        "smoothing": {
            "type": ["object", "null"], "additionalProperties": False,
            "properties": {"kernel_width": {"type": "integer", "minimum": 1},
                           "cadence": {"type": "integer", "minimum": 1}},
        },
        "horizon": {"type": ["number", "null"]},
        "snapshots": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "scenario_params": {"type": "object"},
    },
}

_DEFAULTS: dict[str, Any] = {
    "engine": "both",
    "grid": {"x_min": 0.0, "x_max": 1.0, "n_cells": 128, "boundary": "wall"},
    "constants": {"hbar": 1.0, "mass": 1.0},
    "dds": {"dt_fraction": 0.5, "reach": 1.0, "a": None, "calibration": A_CALIBRATION,
            "integer_mode": False, "samples": 100000, "waiting_mode": False},
    "fd": {"dt_fraction": 0.1, "mode": "standard", "update": "staggered"},
    "smoothing": None,
    "horizon": None,
    "snapshots": 20,
    "seed": 0,
    "output_dir": "runs",
    "scenario_params": {},
}

_SCENARIO_PARAMS: dict[str, dict[str, Any]] = {
    "gaussian_dispersion": {"center": None, "sigma": None, "k0": 0.0},
    "ground_vs_modulus": {},
    "two_packet_interference": {"sigma": None, "k0": None, "prominence": 0.1},
    "double_well": {"barrier_width": None, "barrier_height": 100.0, "swing": 0.2},
}


class ConfigError(ValueError):
    """An experiment config failed validation."""


class RunFailure(RuntimeError):
    """A run stopped part-way; the manifest on disk is marked failed."""

    def __init__(self, message: str, manifest_path: Path | None = None):
        super().__init__(message)
        self.manifest_path = manifest_path


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description (defaults filled in, validated)."""

    scenario: str
    engine: str
    grid: dict
    constants: dict
    dds: dict
    fd: dict
    smoothing: dict | None
    horizon: float
    snapshots: int
    seed: int
    output_dir: str
    scenario_params: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        merged = _merge(_DEFAULTS, raw)
        merged["scenario_params"] = _merge(_SCENARIO_PARAMS[merged["scenario"]],
                                           merged.get("scenario_params") or {})
        unknown = set(merged["scenario_params"]) - set(_SCENARIO_PARAMS[merged["scenario"]])
        if unknown:
            raise ConfigError(f"scenario_params: unknown keys {sorted(unknown)}")
        if merged["horizon"] is None:
            merged["horizon"] = _default_horizon(merged)
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        return cls.from_dict(raw or {})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.to_dict(), changes))

    # derived objects

    def make_grid(self) -> Grid1D:
        g = self.grid
        return Grid1D(float(g["x_min"]), float(g["x_max"]), int(g["n_cells"]), g["boundary"])

    def make_constants(self) -> PhysicalConstants:
        return PhysicalConstants(float(self.constants["hbar"]), float(self.constants["mass"]))

    def _steps(self, dt_nominal: float) -> tuple[int, float]:
        per = max(1, math.ceil(self.horizon / (self.snapshots * dt_nominal) - 1e-9))
        n = per * self.snapshots
        return n, self.horizon / n

    def dds_steps(self) -> tuple[int, float]:
        """Total DDS step count and the step that lands exactly on every snapshot."""
        limit = stability_limit(self.make_grid(), self.make_constants())
        return self._steps(self.dds["dt_fraction"] * limit)

    def fd_steps(self) -> tuple[int, float]:
        limit = stability_limit(self.make_grid(), self.make_constants())
        return self._steps(self.fd["dt_fraction"] * limit)

    def make_dds_params(self) -> DdsParams:
        grid, const = self.make_grid(), self.make_constants()
        _, dt = self.dds_steps()
        c = self.dds["reach"] * grid.dx / dt
        a = self.dds["a"]
        if a is None:
            a = explosion_fraction(grid, const, dt, c, self.dds["calibration"])
        return DdsParams(a=float(a), max_speed=c, dt=dt, integer_mode=self.dds["integer_mode"],
                         rng_seed=self.seed, waiting_mode=self.dds["waiting_mode"])

    def make_fd_scheme(self) -> FdScheme:
        _, dt = self.fd_steps()
        return FdScheme(dt=dt, mode=self.fd["mode"], update=self.fd["update"])

    def total_weight(self) -> float:
        return float(self.dds["samples"]) if self.dds["integer_mode"] else 1.0

    def validate(self) -> None:
        """Check every cross-field constraint; raises :class:`ConfigError` listing all problems."""
        errs: list[str] = []
        try:
            grid = self.make_grid()
            const = self.make_constants()
        except ValueError as exc:
            raise ConfigError(f"grid/constants: {exc}") from None
        if not (isinstance(self.horizon, (int, float)) and self.horizon > 0):
            errs.append("horizon must be positive")
        if not 0 < self.fd["dt_fraction"] <= 1:
            errs.append("fd.dt_fraction must lie in (0, 1] (explicit stability bound)")
        if not 1.0 <= self.dds["reach"] < 2.0:
            errs.append("dds.reach must lie in [1, 2): thin layer must travel c*dt in [dx, 2dx)")
        if self.smoothing is not None:
            kw = self.smoothing.get("kernel_width", 3)
            if kw % 2 == 0:
                errs.append("smoothing.kernel_width must be odd")
            if kw > grid.n_cells:
                errs.append("smoothing.kernel_width exceeds the grid")
        if not errs:
            try:
                self.make_dds_params()
            except ValueError as exc:
                errs.append(f"dds: {exc}")
        if grid.boundary == "open":
            errs.append("scenarios need a closed domain (boundary wall, mirror or periodic)")
        errs.extend(_check_scenario(self, grid, const))
        if errs:
            raise ConfigError("; ".join(errs))


def _default_horizon(cfg: dict) -> float:
    g, c, sp = cfg["grid"], cfg["constants"], cfg["scenario_params"]
    length = float(g["x_max"]) - float(g["x_min"])
    dx = length / int(g["n_cells"])
    hbar, mass = float(c["hbar"]), float(c["mass"])
    name = cfg["scenario"]
    if name == "gaussian_dispersion":
        # packet width doubles
        sigma = sp["sigma"] or length / 20
        return 2 * math.sqrt(3) * mass * sigma**2 / hbar
    if name == "ground_vs_modulus":
        # one beat period of the two lowest box modes present in the modulus state
        e1 = hbar**2 * math.pi**2 / (2 * mass * length**2)
        return 2 * math.pi * hbar / (9 * e1 - e1)
    if name == "two_packet_interference":
        k0 = sp["k0"] or math.pi / (8 * dx)
        return (length / 4) * mass / (hbar * k0)
    # double well: just past one tunnelling period (0.88 at the defaults)
    return 1.0


def _check_scenario(cfg: ExperimentConfig, grid: Grid1D, const: PhysicalConstants) -> list[str]:
    sp, errs = cfg.scenario_params, []
    for key in ("sigma", "barrier_width"):
        if sp.get(key) is not None and not sp[key] > 0:
            errs.append(f"scenario_params.{key} must be positive")
    if cfg.scenario == "gaussian_dispersion" and sp["center"] is not None:
        if not grid.x_min < sp["center"] < grid.x_max:
            errs.append("scenario_params.center lies outside the grid")
    if cfg.scenario in ("gaussian_dispersion", "two_packet_interference"):
        k0 = _two_packet_k0(cfg, grid) if cfg.scenario == "two_packet_interference" else sp["k0"]
        if abs(k0) * grid.dx > 0.9 * math.pi:
            errs.append("k0*dx exceeds 0.9 pi: the carrier is not resolved on the grid")
    if cfg.scenario == "double_well" and not sp["barrier_height"] > 0:
        errs.append("scenario_params.barrier_height must be positive")
    return errs


# --------------------------------------------------------------------------
# metrics and smoothing


def metric_m(snap0: DensityField, snap_t: DensityField) -> float:
    """L1 distance between per-cell sample masses of two snapshots."""
    if snap0.grid != snap_t.grid:
        raise ValueError("snapshots live on different grids")
    return float(np.abs(snap0.masses() - snap_t.masses()).sum())


def triangular_kernel(width: int) -> np.ndarray:
    """Normalised triangular weights for an odd ``width`` (sums to 1 exactly)."""
    if width < 1 or width % 2 == 0:
        raise ValueError("kernel width must be odd and >= 1")
    h = width // 2
    k = np.array([h + 1 - abs(j) for j in range(-h, h + 1)], dtype=float)
    return k / (h + 1) ** 2


def _reflect(idx: np.ndarray, n: int, periodic: bool) -> np.ndarray:
    if periodic:
        return idx % n
    idx = np.where(idx < 0, -idx - 1, idx)
    return np.where(idx >= n, 2 * n - idx - 1, idx)


def _spread(mass: np.ndarray, kernel: np.ndarray, quantum: float | None, periodic: bool):
    """Per-offset portions of every cell's mass; the centre keeps the rounding remainder."""
    n, h = mass.size, kernel.size // 2
    portions = []
    for j, kk in zip(range(-h, h + 1), kernel):
        if j == 0:
            continue
        part = mass * kk if quantum is None else np.round(mass * kk / quantum) * quantum
        portions.append((_reflect(np.arange(n) + j, n, periodic), part))
    keep = mass - sum(p for _, p in portions) if portions else mass.copy()
    portions.append((np.arange(n), keep))
    return portions


def smooth(obj, kernel_width: int):
    """Convolve per-cell weights with a triangular kernel, mirrored at closed edges.

    Accepts a :class:`DensityField` or a :class:`Swarm`.  For swarms the
    weights stay multiples of the swarm quantum, so the total is conserved
    exactly, and each cell's speed becomes the mass-weighted mean of the
    speeds carried in by the kernel.
    """
    kernel = triangular_kernel(kernel_width)
    if kernel_width == 1:
        return obj
    if isinstance(obj, DensityField):
        mass = obj.masses()
        out = np.zeros_like(mass)
        for tgt, part in _spread(mass, kernel, None, obj.grid.periodic):
            np.add.at(out, tgt, part)
        return DensityField(obj.grid, out / obj.grid.dx)
    if not isinstance(obj, Swarm):
        raise TypeError("smooth expects a DensityField or a Swarm")
    grid = obj.grid
    mass = obj.cell_weights()
    vel = cell_velocity(obj)
    w_out = np.zeros(grid.n_cells)
    p_out = np.zeros(grid.n_cells)
    for tgt, part in _spread(mass, kernel, obj.quantum, grid.periodic):
        np.add.at(w_out, tgt, part)
        np.add.at(p_out, tgt, part * vel)
    occ = np.nonzero(w_out > 0)[0]
    k = occ.size
    return obj.with_arrays(positions=grid.centers[occ], speeds=p_out[occ] / w_out[occ],
                           weights=w_out[occ], shifts=np.zeros(k), internal_energy=np.zeros(k),
                           thin=np.zeros(k, bool))


def count_fringes(rho: np.ndarray, prominence: float = 0.1) -> int:
    """Number of density maxima whose prominence is at least ``prominence`` times the peak."""
    rho = np.asarray(rho, dtype=float)
    if rho.max() <= 0:
        return 0
    padded = np.concatenate([[0.0], rho, [0.0]])
    peaks, _ = find_peaks(padded, prominence=prominence * rho.max())
    return int(peaks.size)


def oscillation_swings(series, swing: float) -> int:
    """Count alternating excursions of at least ``swing`` (peak to trough or trough to peak).

    Two swings make one full oscillation.
    """
    p = np.asarray(series, dtype=float)
    if p.size == 0:
        return 0
    hi = lo = p[0]
    direction, swings = 0, 0
    for x in p[1:]:
        if direction >= 0:
            hi = max(hi, x)
        if direction <= 0:
            lo = min(lo, x)
        if direction >= 0 and hi - x >= swing:
            swings, direction, lo = swings + 1, -1, x
        elif direction <= 0 and x - lo >= swing:
            swings, direction, hi = swings + 1, 1, x
    return swings


# --------------------------------------------------------------------------
# scenario set-up


@dataclass
class ScenarioState:
    label: str
    psi: WaveField
    potential: PotentialField


def gaussian(grid: Grid1D, center: float, sigma: float, k0: float = 0.0) -> np.ndarray:
    x = grid.centers
    return np.exp(-((x - center) ** 2) / (4 * sigma**2) + 1j * k0 * (x - center))


def _two_packet_k0(cfg: ExperimentConfig, grid: Grid1D) -> float:
    k0 = cfg.scenario_params["k0"]
    return math.pi / (8 * grid.dx) if k0 is None else float(k0)


def double_well_potential(grid: Grid1D, width: float | None, height: float) -> PotentialField:
    mid = 0.5 * (grid.x_min + grid.x_max)
    return compile_potential([Barrier(mid, width or grid.length / 16, height)], grid=grid)


def lattice_eigenstates(v: PotentialField, constants: PhysicalConstants, k: int = 2):
    """Lowest ``k`` eigenpairs of the lattice Hamiltonian used by the FD engine."""
    grid = v.grid
    if grid.periodic:
        raise ValueError("tridiagonal eigensolver needs a closed (non-periodic) grid")
    g = constants.gamma(grid)
    ghost = {"wall": g, "mirror": -g, "open": 0.0}[grid.boundary]
    diag = constants.hbar * 2 * g + v.v
    diag = diag.copy()
    diag[0] += constants.hbar * ghost
    diag[-1] += constants.hbar * ghost
    off = -constants.hbar * g * np.ones(grid.n_cells - 1)
    return eigh_tridiagonal(diag, off, select="i", select_range=(0, k - 1))


def left_localised_state(v: PotentialField, constants: PhysicalConstants):
    """(phi0 +- phi1)/sqrt 2 with the sign that puts the weight in the left well; also the tunnelling period."""
    energies, vec = lattice_eigenstates(v, constants, 2)
    half = v.grid.n_cells // 2
    best = None
    for sgn in (1.0, -1.0):
        phi = vec[:, 0] + sgn * vec[:, 1]
        left = np.sum(phi[:half] ** 2) / np.sum(phi**2)
        if best is None or left > best[0]:
            best = (left, phi)
    period = 2 * math.pi * constants.hbar / (energies[1] - energies[0])
    return WaveField.from_complex(v.grid, best[1]).normalized(), period


def scenario_states(cfg: ExperimentConfig) -> tuple[list[ScenarioState], dict]:
    """Initial wavefunctions and potentials of a scenario, plus scenario facts for the manifest."""
    grid, const = cfg.make_grid(), cfg.make_constants()
    sp = cfg.scenario_params
    zero = PotentialField.zero(grid)
    mid = 0.5 * (grid.x_min + grid.x_max)
    info: dict[str, Any] = {}
    if cfg.scenario == "gaussian_dispersion":
        sigma = sp["sigma"] or grid.length / 20
        center = mid if sp["center"] is None else sp["center"]
        psi = WaveField.from_complex(grid, gaussian(grid, center, sigma, sp["k0"])).normalized()
        info.update(sigma=sigma, center=center, k0=sp["k0"])
        return [ScenarioState("packet", psi, zero)], info
    if cfg.scenario == "ground_vs_modulus":
        u = (grid.centers - grid.x_min) / grid.length
        ground = WaveField.from_complex(grid, np.sin(np.pi * u)).normalized()
        modulus = WaveField.from_complex(grid, 1.0 - np.abs(2 * u - 1)).normalized()
        return [ScenarioState("ground", ground, zero), ScenarioState("modulus", modulus, zero)], info
    if cfg.scenario == "two_packet_interference":
        sigma = sp["sigma"] or grid.length / 20
        k0 = _two_packet_k0(cfg, grid)
        amp = (gaussian(grid, grid.x_min + grid.length / 4, sigma, k0)
               + gaussian(grid, grid.x_min + 3 * grid.length / 4, sigma, -k0))
        info.update(sigma=sigma, k0=k0, k0_dx=k0 * grid.dx)
        return [ScenarioState("packets", WaveField.from_complex(grid, amp).normalized(), zero)], info
    v = double_well_potential(grid, sp["barrier_width"], sp["barrier_height"])
    psi, period = left_localised_state(v, const)
    info.update(tunnelling_period=float(period), barrier_height=sp["barrier_height"],
                barrier_width=sp["barrier_width"] or grid.length / 16)
    return [ScenarioState("double_well", psi, v)], info


def left_probability(masses: np.ndarray) -> float:
    half = masses.size // 2
    return float(masses[:half].sum() / masses.sum())


# --------------------------------------------------------------------------
# simulation


@dataclass
class StateResult:
    """In-memory record of one simulated state (all arrays per snapshot)."""

    label: str
    times: list = field(default_factory=list)
    rho_dds: list = field(default_factory=list)
    v_dds: list = field(default_factory=list)
    thin: list = field(default_factory=list)
    rho_fd: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def metrics(self, dx: float) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"t": np.array(self.times)}
        for key, series in (("M_dds", self.rho_dds), ("M_fd", self.rho_fd)):
            if series:
                out[key] = np.array([np.abs(r - series[0]).sum() * dx for r in series])
        if self.rho_dds and self.rho_fd:
            out["L1_dds_vs_fd"] = np.array([np.abs(a - b).sum() * dx
                                            for a, b in zip(self.rho_dds, self.rho_fd)])
        return out


def _fd_density(psi: WaveField) -> np.ndarray:
    rho = psi.density()
    return rho / (rho.sum() * psi.grid.dx)


def simulate_state(cfg: ExperimentConfig, state: ScenarioState, result: StateResult | None = None,
                   smoothing: dict | None | str = "config") -> StateResult:
    """Run the configured engines on one initial state, filling ``result`` as it goes.

    Snapshots are taken at ``k * horizon / snapshots``; both engines use step
    sizes that land on those times exactly.
    """
    res = result if result is not None else StateResult(state.label)
    grid, const = cfg.make_grid(), cfg.make_constants()
    smooth_cfg = cfg.smoothing if smoothing == "config" else smoothing
    times = [k * cfg.horizon / cfg.snapshots for k in range(cfg.snapshots + 1)]
    run_dds = cfg.engine in ("dds", "both")
    run_fd = cfg.engine in ("fd", "both")

    fd_series = []
    if run_fd:
        scheme = cfg.make_fd_scheme()
        n_fd, _ = cfg.fd_steps()
        per = n_fd // cfg.snapshots
        psi = state.psi
        fd_series.append(_fd_density(psi))
        for _ in range(cfg.snapshots):
            for _ in range(per):
                psi = step_explicit(psi, state.potential, scheme, const)
            fd_series.append(_fd_density(psi))

    if not run_dds:
        for t, r in zip(times, fd_series):
            res.times.append(t)
            res.rho_fd.append(r)
        return res

    params = cfg.make_dds_params()
    n_dds, _ = cfg.dds_steps()
    per = n_dds // cfg.snapshots
    swarm = swarm_from_wavefunction(state.psi, cfg.total_weight(), params, const)
    w0 = total_weight(swarm)
    width = smooth_cfg.get("kernel_width", 3) if smooth_cfg else 1
    cadence = smooth_cfg.get("cadence", 1) if smooth_cfg else 0
    resid, ratio, thin_sum, steps = 0.0, 0.0, 0.0, 0

    def record(k, sw, thin_frac):
        res.times.append(times[k])
        res.rho_dds.append(density(sw).rho.copy())
        res.v_dds.append(cell_velocity(sw))
        res.thin.append(thin_frac)
        if run_fd:
            res.rho_fd.append(fd_series[k])

    record(0, swarm, 0.0)
    for k in range(1, cfg.snapshots + 1):
        for _ in range(per):
            swarm = dds_step(swarm, state.potential)
            steps += 1
            if cadence and steps % cadence == 0:
                swarm = smooth(swarm, width)
            led = swarm.diagnostics["ledger"]
            resid = max(resid, float(np.max(np.abs(led.residual))))
            ratio = max(ratio, led.speed_ratio)
            thin_sum += led.thin_fraction
        record(k, swarm, swarm.diagnostics["ledger"].thin_fraction)
    res.diagnostics = {
        "steps": steps,
        "dt": params.dt,
        "a": params.a,
        "max_speed": params.max_speed,
        "weight_initial": w0,
        "weight_final": total_weight(swarm),
        "weight_drift": total_weight(swarm) - w0,
        "max_momentum_residual": resid,
        "max_speed_ratio": ratio,
        "regime_violations": int(swarm.diagnostics.get("violations", 0)),
        "mean_thin_fraction": thin_sum / max(steps, 1),
        "members_final": len(swarm),
    }
    return res


def _scenario_summary(cfg: ExperimentConfig, results: list[StateResult], info: dict) -> dict:
    grid = cfg.make_grid()
    out: dict[str, Any] = {}
    if cfg.scenario == "ground_vs_modulus":
        m = {r.label: r.metrics(grid.dx) for r in results}
        for eng in ("dds", "fd"):
            key = f"M_{eng}"
            if key in m["ground"]:
                gap = m["modulus"][key] - m["ground"][key]
                out[f"gap_{eng}_min"] = float(gap.min())
                out[f"gap_{eng}_nonnegative"] = bool(np.all(gap >= 0))
    elif cfg.scenario == "two_packet_interference":
        prom = cfg.scenario_params["prominence"]
        r = results[0]
        if r.rho_fd:
            out["fringes_fd"] = count_fringes(r.rho_fd[-1], prom)
        if r.rho_dds:
            out["fringes_dds"] = count_fringes(r.rho_dds[-1], prom)
    elif cfg.scenario == "double_well":
        swing = cfg.scenario_params["swing"]
        r = results[0]
        for eng, series in (("dds", r.rho_dds), ("fd", r.rho_fd)):
            if series:
                p = [left_probability(s) for s in series]
                out[f"p_left_{eng}_min"] = float(min(p))
                out[f"p_left_{eng}_max"] = float(max(p))
                out[f"oscillations_{eng}"] = oscillation_swings(p, swing) // 2
    out.update(info)
    return out


def simulate(cfg: ExperimentConfig) -> tuple[list[StateResult], dict]:
    """Run every state of the scenario in memory; returns results and the scenario summary."""
    states, info = scenario_states(cfg)
    results = [simulate_state(cfg, s) for s in states]
    return results, _scenario_summary(cfg, results, info)


# --------------------------------------------------------------------------
# persistence


@dataclass
class RunManifest:
    path: Path
    data: dict

    @property
    def status(self) -> str:
        return self.data["status"]

    @property
    def run_dir(self) -> Path:
        return self.path.parent

    def files(self, role: str | None = None) -> list[str]:
        return [f["name"] for f in self.data["files"] if role is None or f["role"] == role]

    @classmethod
    def load(cls, ref: str | os.PathLike) -> "RunManifest":
        p = Path(ref)
        if p.is_dir():
            p = p / "manifest.json"
        with open(p, encoding="utf-8") as fh:
            return cls(p, json.load(fh))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv_bytes(header: list[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def _atomic_write(path: Path, payload: bytes) -> str:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return hashlib.sha256(payload).hexdigest()


def _data_rows(grid: Grid1D, r: StateResult):
    x = grid.centers
    for k, t in enumerate(r.times):
        rd = r.rho_dds[k] if r.rho_dds else None
        rf = r.rho_fd[k] if r.rho_fd else None
        v = r.v_dds[k] if r.v_dds else None
        thin = r.thin[k] if r.thin else None
        for i in range(grid.n_cells):
            yield (t, i, x[i], None if rd is None else rd[i], None if rf is None else rf[i],
                   None if v is None else v[i], thin)


def run_dir_name(cfg: ExperimentConfig) -> str:
    blob = json.dumps({k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
                      sort_keys=True).encode()
    return f"{cfg.scenario}_{cfg.engine}_seed{cfg.seed}_{hashlib.sha256(blob).hexdigest()[:8]}"


def _persist(run_dir: Path, grid: Grid1D, results: list[StateResult], extra_tables: dict) -> list[dict]:
    files = []
    for r in results:
        name = f"data_{r.label}.csv"
        payload = _csv_bytes(["t", "cell_index", "x_center", "rho_dds", "rho_fd", "v_mean",
                              "thin_layer_fraction"], _data_rows(grid, r))
        files.append({"name": name, "role": "data", "label": r.label,
                      "sha256": _atomic_write(run_dir / name, payload)})
        m = r.metrics(grid.dx)
        cols = ["t", "M_dds", "M_fd", "L1_dds_vs_fd"]
        rows = zip(*[m.get(c, [None] * len(r.times)) for c in cols])
        name = f"metrics_{r.label}.csv"
        files.append({"name": name, "role": "metrics", "label": r.label,
                      "sha256": _atomic_write(run_dir / name, _csv_bytes(cols, rows))})
    for name, (header, rows) in extra_tables.items():
        files.append({"name": name, "role": "table", "label": None,
                      "sha256": _atomic_write(run_dir / name, _csv_bytes(header, rows))})
    return files


def _extra_tables(cfg: ExperimentConfig, grid: Grid1D, results: list[StateResult]) -> dict:
    tables: dict = {}
    if cfg.scenario == "ground_vs_modulus" and len(results) == 2 and results[1].times:
        g, m = (r.metrics(grid.dx) for r in results)
        n = min(len(results[0].times), len(results[1].times))
        cols = ["t", "M_dds_ground", "M_dds_modulus", "gap_dds", "M_fd_ground", "M_fd_modulus",
                "gap_fd"]
        rows = []
        for k in range(n):
            row = [g["t"][k]]
            for key in ("M_dds", "M_fd"):
                if key in g and key in m:
                    row += [g[key][k], m[key][k], m[key][k] - g[key][k]]
                else:
                    row += [None, None, None]
            rows.append(row)
        tables["stability_gap.csv"] = (cols, rows)
    if cfg.scenario == "double_well" and results and results[0].times:
        r = results[0]
        rows = [(t, left_probability(r.rho_dds[k]) if r.rho_dds else None,
                 left_probability(r.rho_fd[k]) if r.rho_fd else None)
                for k, t in enumerate(r.times)]
        tables["p_left.csv"] = (["t", "P_left_dds", "P_left_fd"], rows)
    return tables


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> RunManifest:
    """Simulate a validated config and write its data, metrics and manifest.

    A failure part-way writes whatever snapshots completed and a manifest
    with ``status: failed``, then raises :class:`RunFailure`.
    """
    grid = cfg.make_grid()
    base = Path(out_dir if out_dir is not None else cfg.output_dir)
    run_dir = base / run_dir_name(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    states, info = scenario_states(cfg)
    results = [StateResult(s.label) for s in states]
    error = None
    try:
        for s, r in zip(states, results):
            simulate_state(cfg, s, r)
    except Exception as exc:  # recorded in the manifest, then re-raised
        error = exc
    done = [r for r in results if r.times]
    files = _persist(run_dir, grid, done, _extra_tables(cfg, grid, done))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "status": "failed" if error else "completed",
        "started": started,
        "finished": _now(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "grid": {"x_min": grid.x_min, "x_max": grid.x_max, "n_cells": grid.n_cells,
                 "boundary": grid.boundary},
        "snapshot_times": [k * cfg.horizon / cfg.snapshots for k in range(cfg.snapshots + 1)],
        "diagnostics": {r.label: r.diagnostics for r in results},
        "summary": _scenario_summary(cfg, results, info) if not error else info,
        "files": files,
    }
    if error:
        manifest["error"] = f"{type(error).__name__}: {error}"
        manifest["last_good_snapshot"] = {r.label: (r.times[-1] if r.times else None)
                                          for r in results}
    path = run_dir / "manifest.json"
    _atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True, default=_json_default)
                         + "\n").encode("utf-8"))
    if error:
        raise RunFailure(manifest["error"], path) from error
    return RunManifest(path, manifest)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# --------------------------------------------------------------------------
# comparison


class IncompatibleRunsError(ValueError):
    """Two runs do not share a grid or snapshot times."""


def _read_columns(path: Path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {}
    for j, h in enumerate(header):
        vals = [r[j] for r in body]
        cols[h] = (np.array([float(v) for v in vals]) if all(vals)
                   else None)
    return cols


def compare_runs(run_a, run_b, out_path: str | os.PathLike | None = None) -> dict:
    """Per-snapshot density distances and metric-M deltas between two runs.

    Densities compared are the DDS columns when both runs have them, else
    the FD columns.  The table is written as CSV when ``out_path`` is given.
    """
    a = run_a if isinstance(run_a, RunManifest) else RunManifest.load(run_a)
    b = run_b if isinstance(run_b, RunManifest) else RunManifest.load(run_b)
    if a.data["grid"] != b.data["grid"]:
        raise IncompatibleRunsError("runs use different grids")
    if not np.allclose(a.data["snapshot_times"], b.data["snapshot_times"], rtol=1e-12, atol=0):
        raise IncompatibleRunsError("runs use different snapshot times")
    labels_a = {f["label"]: f["name"] for f in a.data["files"] if f["role"] == "data"}
    labels_b = {f["label"]: f["name"] for f in b.data["files"] if f["role"] == "data"}
    common = sorted(set(labels_a) & set(labels_b))
    if not common:
        raise IncompatibleRunsError("runs share no simulated state")
    n = a.data["grid"]["n_cells"]
    dx = (a.data["grid"]["x_max"] - a.data["grid"]["x_min"]) / n
    rows, summary = [], {}
    for label in common:
        ca = _read_columns(a.run_dir / labels_a[label])
        cb = _read_columns(b.run_dir / labels_b[label])
        col = "rho_dds" if ca["rho_dds"] is not None and cb["rho_dds"] is not None else "rho_fd"
        if ca[col] is None or cb[col] is None:
            raise IncompatibleRunsError(f"state {label!r}: no density column in common")
        ra, rb = ca[col].reshape(-1, n), cb[col].reshape(-1, n)
        if ra.shape != rb.shape:
            raise IncompatibleRunsError(f"state {label!r}: snapshot counts differ")
        t = ca["t"].reshape(-1, n)[:, 0]
        ma = np.abs(ra - ra[0]).sum(axis=1) * dx
        mb = np.abs(rb - rb[0]).sum(axis=1) * dx
        l1 = np.abs(ra - rb).sum(axis=1) * dx
        linf = np.abs(ra - rb).max(axis=1)
        for k in range(t.size):
            rows.append((label, col, t[k], l1[k], linf[k], ma[k], mb[k], mb[k] - ma[k]))
        summary[label] = {"column": col, "final_l1": float(l1[-1]), "max_l1": float(l1.max()),
                          "max_linf": float(linf.max()),
                          "max_abs_m_delta": float(np.abs(mb - ma).max())}
    header = ["state", "column", "t", "L1", "Linf", "M_a", "M_b", "M_delta"]
    if out_path is not None:
        p = Path(out_path)
        p.parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0], r[1]] + [_fmt(v) for v in r[2:]])
        _atomic_write(p, buf.getvalue().encode("utf-8"))
    return {"rows": rows, "header": header, "summary": summary}


# --------------------------------------------------------------------------
# shipped configs


def shipped_config_path(scenario: str) -> Path:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    return Path(str(resources.files("ddswarm") / "configs" / f"{scenario}.yaml"))


def default_config(scenario: str, **overrides) -> ExperimentConfig:
    """Shipped default config of a scenario, with optional top-level overrides."""
    with open(shipped_config_path(scenario), encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return ExperimentConfig.from_dict(_merge(raw, overrides))
