"""Error taxonomy.

Configuration errors (bad inputs, misaligned grids) map to CLI exit code 2,
numerical failures (singular pivots, non-convergence) to exit code 3, and a
lattice cross-check miss to exit code 4.
"""
from __future__ import annotations

__all__ = [
    "SolverError",
    "ConfigError",
    "NumericalError",
    "NonDivisibleHorizon",
    "InvalidDelay",
    "DimensionMismatch",
    "StepMisaligned",
    "OutOfRange",
    "MissingPredictor",
    "InsufficientHistory",
    "TreeTooLarge",
    "ProblemFormatError",
    "SingularGamma",
    "SingularClosure",
    "SingularSystem",
    "IndefiniteRt",
    "OracleMismatch",
]


class SolverError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SolverError):
    exit_code = 2


class NumericalError(SolverError):
    exit_code = 3


class NonDivisibleHorizon(ConfigError):
    """T is not an integer multiple of the step implied by h and d."""


class InvalidDelay(ConfigError):
    """Delay h outside [0, T], or delay step count inconsistent with h."""


class DimensionMismatch(ConfigError):
    """Matrix or vector shapes inconsistent with the state dimension."""


class StepMisaligned(ConfigError):
    """A requested time or step size does not sit on the working grid."""


class OutOfRange(ConfigError):
    """Query outside the domain covered by the computed tables."""


class MissingPredictor(ConfigError):
    """Predictor bank does not cover the lags a reconstruction needs."""


class InsufficientHistory(ConfigError):
    """State or control history too short for the requested prediction."""


class TreeTooLarge(ConfigError):
    """Lattice cross-check requested beyond the exact-enumeration budget."""


class ProblemFormatError(ConfigError):
    """Problem file missing fields or carrying malformed values."""


class SingularGamma(NumericalError):
    """Step closure matrix numerically singular during the backward sweep."""

    def __init__(self, k: int, rcond: float):
        self.k = k
        self.rcond = rcond
        super().__init__(
            f"closure matrix at step {k} numerically singular "
            f"(reciprocal condition {rcond:.3e})"
        )


class SingularClosure(NumericalError):
    """Diffusion closure factor I - Cbar P numerically singular."""

    def __init__(self, t: float, rcond: float):
        self.t = t
        self.rcond = rcond
        super().__init__(
            f"diffusion closure at t={t:.6g} numerically singular "
            f"(reciprocal condition {rcond:.3e})"
        )


class SingularSystem(NumericalError):
    """Lattice linear system has no usable factorization."""


class IndefiniteRt(NumericalError):
    """Effective control weight lost positive definiteness."""

    def __init__(self, t: float, eigmin: float):
        self.t = t
        self.eigmin = eigmin
        super().__init__(
            f"effective control weight at t={t:.6g} not positive definite "
            f"(min eigenvalue {eigmin:.3e})"
        )


class OracleMismatch(SolverError):
    """Recursion output disagrees with the lattice solve beyond tolerance."""

    exit_code = 4
