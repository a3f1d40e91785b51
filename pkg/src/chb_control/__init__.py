"""Optimal control of a Cahn-Hilliard-Brinkman tumour growth model.

The package discretises the state system with Q1 finite elements on a
rectangle and implicit-explicit time stepping, solves the exact discrete
linearized and adjoint systems, runs a projected-gradient optimizer on the
box-constrained control problem and evaluates sufficient conditions for
local and global optimality.
"""
from .output import code_version

from .model import InterpolationH, ModelParams, Potential, h_sup_norms, psi_third_bound
from .mesh import StructuredGrid
from .state import Scheme, SolverOptions, Trajectory, solve_state
from .sensitivity import LinearizedRHS, frechet_state, solve_linearized
from .adjoint import AdjointRHS, CostateTrajectory, solve_adjoint_general, solve_costate
from .control import (ControlProblem, Objective, OptimizerOptions, certify_global, check_second_order,
                      project, projected_gradient, stationarity_residual)

__version__ = code_version()

__all__ = [
    "InterpolationH", "ModelParams", "Potential", "h_sup_norms", "psi_third_bound",
    "StructuredGrid",
    "Scheme", "SolverOptions", "Trajectory", "solve_state",
    "LinearizedRHS", "frechet_state", "solve_linearized",
    "AdjointRHS", "CostateTrajectory", "solve_adjoint_general", "solve_costate",
    "ControlProblem", "Objective", "OptimizerOptions", "certify_global", "check_second_order",
    "project", "projected_gradient", "stationarity_residual",
    "__version__",
]
