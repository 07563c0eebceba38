"""Meshless element-free Galerkin solver for finite-deformation elasticity.

Interpolating modified moving least squares shape functions, total Lagrangian
explicit dynamics with dynamic relaxation, and a verification harness.
"""
from .approx import ApproxParams, gradient_check, kronecker_audit, shape_at_points, shape_mmls
from .cloud import (
    IntegrationGrid, NodeCloud, find_support, gauss_points, generate_cube_grid, generate_cylinder_grid,
    load_grid, save_grid,
)
from .errors import (
    ConfigError, DataError, DivergenceError, EFGError, InvertedElementError, ParseError, SingularMomentError,
    SupportError,
)
from .material import MaterialParams, second_pk_stress, strain_energy
from .solver import BoundaryCondition, RunSettings, internal_forces, lump_mass, precompute, run

__version__ = "0.1.0"

__all__ = [
    "ApproxParams", "BoundaryCondition", "ConfigError", "DataError", "DivergenceError", "EFGError",
    "IntegrationGrid", "InvertedElementError", "MaterialParams", "NodeCloud", "ParseError", "RunSettings",
    "SingularMomentError", "SupportError", "find_support", "gauss_points", "generate_cube_grid",
    "generate_cylinder_grid", "gradient_check", "internal_forces", "kronecker_audit", "load_grid", "lump_mass",
    "precompute", "run", "save_grid", "second_pk_stress", "shape_at_points", "shape_mmls", "strain_energy",
    "__version__",
]
