"""Quantitative fluorescence photoacoustic tomography on a 2-D disc.

Discrete-ordinates transport, the coupled excitation/emission forward map,
and three reconstructions of the fluorescence absorption coefficient: the
squeeze iterative method, Barzilai-Borwein optimization, and their hybrid.
"""

from .forward import CoefficientSet, MeasurementSet, SolverOptions, boundary_patch_source, forward_map
from .geometry import AngularFlux, AngularGrid, Grid, ScalarField, build_angular_grid, build_grid
from .recon_hybrid import HybridConfig, run_hybrid
from .recon_opt import run_opt
from .recon_sim import run_sim, sim_step
from .transport import RteProblem, SolverError, hg_kernel, solve_adjoint_rte, solve_rte

__version__ = "0.1.0"

__all__ = [
    "AngularFlux", "AngularGrid", "CoefficientSet", "Grid", "HybridConfig", "MeasurementSet",
    "RteProblem", "ScalarField", "SolverError", "SolverOptions", "boundary_patch_source",
    "build_angular_grid", "build_grid", "forward_map", "hg_kernel", "run_hybrid", "run_opt",
    "run_sim", "sim_step", "solve_adjoint_rte", "solve_rte",
]
