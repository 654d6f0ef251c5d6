"""Solver toolkit for linear forward-backward SDEs with transmission delay.

Layout: `model` holds problem data and grids; `discrete_riccati` runs the
backward decoupling recursion; `continuous_riccati` integrates the kernel
ODE by the method of steps; `simulate` walks closed-loop paths and checks
them against an exact binary-lattice solver; `lq` synthesizes the delayed
linear-quadratic controller; `cli` wires everything to problem files.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DimensionMismatch,
    IndefiniteRt,
    InsufficientHistory,
    InvalidDelay,
    MissingPredictor,
    NonDivisibleHorizon,
    NumericalError,
    OracleMismatch,
    OutOfRange,
    ProblemFormatError,
    SingularClosure,
    SingularGamma,
    SingularSystem,
    SolverError,
    StepMisaligned,
    TreeTooLarge,
)
from .model import (
    DiscreteSystem,
    NoiseEnsemble,
    SystemSpec,
    TimeGrid,
    TimeTable,
    build_grid,
    discretize,
    realize_coefficients,
    sample_noise,
)
from .discrete_riccati import (
    DiscreteRiccatiTables,
    backward_sweep,
    closed_loop_step,
    reconstruct_p,
)
from .continuous_riccati import (
    ContinuousKernel,
    closed_loop_gains,
    integrate_backward,
    kernel_eval,
)
from .simulate import (
    LatticeOracleSolution,
    PathEnsemble,
    ResidualReport,
    lattice_compare,
    oracle_solve,
    residual_check,
    simulate_paths,
)
from .lq import (
    CostReport,
    CostateReport,
    LqEnsemble,
    LqGains,
    LqSpec,
    costate_reconstruct,
    evaluate_cost,
    predictor,
    synthesize,
)

__all__ = [
    "__version__",
    "ConfigError", "DimensionMismatch", "IndefiniteRt",
    "InsufficientHistory", "InvalidDelay", "MissingPredictor",
    "NonDivisibleHorizon", "NumericalError", "OracleMismatch", "OutOfRange",
    "ProblemFormatError", "SingularClosure", "SingularGamma",
    "SingularSystem", "SolverError", "StepMisaligned", "TreeTooLarge",
    "DiscreteSystem", "NoiseEnsemble", "SystemSpec", "TimeGrid", "TimeTable",
    "build_grid", "discretize", "realize_coefficients", "sample_noise",
    "DiscreteRiccatiTables", "backward_sweep", "closed_loop_step",
    "reconstruct_p",
    "ContinuousKernel", "closed_loop_gains", "integrate_backward",
    "kernel_eval",
    "LatticeOracleSolution", "PathEnsemble", "ResidualReport",
    "lattice_compare", "oracle_solve", "residual_check", "simulate_paths",
    "CostReport", "CostateReport", "LqEnsemble", "LqGains", "LqSpec",
    "costate_reconstruct", "evaluate_cost", "predictor", "synthesize",
]
