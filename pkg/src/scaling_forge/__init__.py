"""Scaling-law laboratory for deep regression on simulated magnetic domains.

Pipeline: build commensurate twisted-bilayer lattices (:mod:`lattice`), relax
classical spin configurations and rasterize domain images (:mod:`spinsim`),
assemble labeled datasets (:mod:`datagen`), train fully-connected regression
networks (:mod:`mlp`), and fit loss-versus-size scaling curves
(:mod:`scalestats`) over manifest-driven experiment grids (:mod:`harness`).
"""

from . import datagen, harness, lattice, mlp, scalestats, spinsim

__version__ = "0.1.0"

__all__ = [
    "datagen",
    "harness",
    "lattice",
    "mlp",
    "scalestats",
    "spinsim",
    "__version__",
]
