"""Control problems with delayed state, adjoints and the worked applications."""

from .core import (
    ControlProblem,
    FubiniResult,
    HamiltonianSpec,
    ObjectiveEstimate,
    OptimalityReport,
    build_adjoint,
    fubini_duality_check,
    maximum_condition_residual,
    objective_functional,
    perturbation_direction,
    solve_adjoint,
    solve_state,
    verify_optimality,
)
from .applications import (
    ApplicationResult,
    Numerics,
    app1_problem,
    app1_solve,
    app2_adjoint_consistency,
    app2_problem,
    app2_range_check,
    app2_solve,
    app3_problem,
    app3_solve,
)

__all__ = [
    "ApplicationResult", "ControlProblem", "FubiniResult", "HamiltonianSpec", "Numerics", "ObjectiveEstimate",
    "OptimalityReport", "app1_problem", "app1_solve", "app2_adjoint_consistency", "app2_problem",
    "app2_range_check", "app2_solve", "app3_problem", "app3_solve", "build_adjoint", "fubini_duality_check",
    "maximum_condition_residual", "objective_functional", "perturbation_direction", "solve_adjoint",
    "solve_state", "verify_optimality",
]
