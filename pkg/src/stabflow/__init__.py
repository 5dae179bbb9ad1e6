"""Stabilized finite elements for power-law flow coupled with transport."""

from .fem import ElementFieldSample, QuadratureRule, quadrature_rule, sample_field
from .harness import (
    ConvergenceRow,
    ErrorReport,
    convergence_study,
    error_report,
    m_norm_error,
    n_norm_error,
    read_csv,
    write_csv,
    write_vtk,
)
from .mesh import Mesh, build_unit_square_mesh, element_geometry
from .model import (
    ManufacturedSolution,
    PhysicalParams,
    diffusion_coeffs,
    exact_solution,
    manufactured_forcing,
    power_law_viscosity,
)
from .solver import (
    FieldState,
    LinearSystem,
    SolverConfig,
    assemble,
    initial_state,
    run,
    solve_linear,
    step,
)
from .stab import (
    StabConsts,
    SubscaleField,
    SubscaleResidual,
    TauSet,
    compute_tau,
    time_modify_tau,
    update_subscales,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceRow",
    "ElementFieldSample",
    "ErrorReport",
    "FieldState",
    "LinearSystem",
    "ManufacturedSolution",
    "Mesh",
    "PhysicalParams",
    "QuadratureRule",
    "SolverConfig",
    "StabConsts",
    "SubscaleField",
    "SubscaleResidual",
    "TauSet",
    "assemble",
    "build_unit_square_mesh",
    "compute_tau",
    "convergence_study",
    "diffusion_coeffs",
    "element_geometry",
    "error_report",
    "exact_solution",
    "initial_state",
    "m_norm_error",
    "manufactured_forcing",
    "n_norm_error",
    "power_law_viscosity",
    "quadrature_rule",
    "read_csv",
    "run",
    "sample_field",
    "solve_linear",
    "step",
    "time_modify_tau",
    "update_subscales",
    "write_csv",
    "write_vtk",
]
