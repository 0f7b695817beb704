"""Exception types shared across the package.

Exit-code mapping used by the CLI: configuration problems are distinct
from numeric failures, which are distinct from simulation divergence.
"""


class SlowmodesError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SlowmodesError):
    """Malformed or inconsistent configuration (unknown kind, bad shape, ...)."""


class InvalidInputError(SlowmodesError):
    """Non-finite or out-of-domain input to an evaluation routine."""


class NumericError(SlowmodesError):
    """Numerical failure (indefinite matrix, non-finite covariance entry, ...)."""


class SimulationDivergenceError(NumericError):
    """Trajectory left the admissible domain; carries the offending step."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")


class FrozenBiasError(SlowmodesError):
    """Attempt to deposit a Gaussian after the bias freeze step."""


class AlignmentError(SlowmodesError):
    """Degenerate geometry in rigid-body alignment."""


class EmptyDatasetError(SlowmodesError):
    """An operation received fewer samples than it needs."""


class GradientCheckError(NumericError):
    """Analytic gradient disagrees with finite differences beyond tolerance."""
