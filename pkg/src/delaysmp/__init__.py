"""Numerical toolkit for optimal control of backward stochastic systems with time delay."""

from .errors import (
    AdaptednessError,
    BoundaryOverlapError,
    ConfigurationError,
    DelaySMPError,
    DomainError,
    MissingInitialPathError,
    MissingTerminalPathError,
    NonConvergenceError,
    StructureError,
)
from .calculus import (
    DelayKernel,
    DelayMeasure,
    MeasureKind,
    SampledProcess,
    TimeGrid,
    advanced_aggregate,
    aggregation_matrix,
    delayed_aggregate,
    splice_boundary_path,
)
from .montecarlo import (
    PathEnsemble,
    RegressionBasis,
    conditional_expectation,
    exponential_martingale,
    generate_brownian,
    ito_and_time_integrals,
)
from .bsde import (
    BSDESolution,
    DelayedBSDEProblem,
    PicardReport,
    contraction_constant,
    picard_solve,
    solve_classical_bsde,
    solve_controlled,
)
from .asde import (
    ASDEProblem,
    ASDESolution,
    LinearAdjointSpec,
    asde_contraction_constant,
    euler_maruyama,
    martingale_decomposition_solve,
    picard_solve_asde,
)
from .aode import (
    AODEProblem,
    CharacteristicSpec,
    GridFunction,
    IntegroODEProblem,
    aode_residual,
    characteristic_root,
    coupled_aode_solve,
    exponential_ansatz,
    integro_ode_solve,
    integro_residual,
    picard_solve_aode,
    solve_characteristic,
)

__version__ = "0.1.0"
