"""Dynamic diffusion swarms versus the lattice Schrödinger equation.

Modules
-------
core           grid, wavefunction, potential and swarm types
fd             explicit finite-difference reference solver
dds            explosion / flight / rearrangement swarm engine
bridge         wavefunction <-> swarm conversion
multiparticle  cortege swarms for n particles
experiments    scenario runner, metrics and persisted outputs
"""

from .core import (Barrier, DdsParams, DensityField, DomainError, Grid1D, PhysicalConstants,
                   PotentialField, Simplex, Swarm, UndefinedDensityError, WaveField,
                   compile_potential, density, total_weight)

__version__ = "0.1.0"

__all__ = ["Barrier", "DdsParams", "DensityField", "DomainError", "Grid1D", "PhysicalConstants",
           "PotentialField", "Simplex", "Swarm", "UndefinedDensityError", "WaveField",
           "compile_potential", "density", "total_weight", "__version__"]
