"""
Error taxonomy for the Entropic Dynamics Laboratory.
Every failure carries a human-readable detail and the CLI exit code it maps to.
"""

from typing import Any, Optional

# Exit codes used by main.py
EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_VALIDATION_FAILURE = 3


class LabError(Exception):
    """Base class. `detail` is shown to the user; `context` is extra structured info."""

    exit_code: int = EXIT_RUNTIME_ERROR

    def __init__(self, detail: str, *, context: Optional[dict[str, Any]] = None) -> None:
        super().__init__(detail)
        self.detail = detail
        self.context = context or {}

    def __str__(self) -> str:
        if not self.context:
            return self.detail
        extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.detail} ({extra})"


class InvalidInputError(LabError, ValueError):
    """Inputs violate an operation's preconditions."""

    exit_code = EXIT_VALIDATION_FAILURE


class InfeasibleError(LabError):
    """No state of knowledge satisfies the supplied information."""

    exit_code = EXIT_INFEASIBLE


class NumericalError(LabError, ArithmeticError):
    """A computation broke down (overflow, non-finite values, lost unitarity)."""

    exit_code = EXIT_RUNTIME_ERROR


# ----- inference -----


class SupportMismatchError(InvalidInputError):
    pass


class AbsoluteContinuityError(InvalidInputError):
    """p assigns mass where q assigns none."""


class InvalidDistributionError(InvalidInputError):
    pass


class ZeroEvidenceError(InvalidInputError):
    pass


class OverconstrainedError(InfeasibleError):
    pass


class NumericalOverflowError(NumericalError):
    pass


# ----- wavefield -----


class PacketBoundaryError(InvalidInputError):
    pass


class NormalizationError(InvalidInputError):
    pass


class SolverBreakdownError(NumericalError):
    pass


class NoValidRegionError(NumericalError):
    pass


class InsufficientCheckpointsError(InvalidInputError):
    pass


class BoundaryDensityError(InvalidInputError):
    """Density at a wall is too large for the osmotic moments to be trusted."""


# ----- sampler / frames -----


class SamplerConfigError(InvalidInputError):
    pass


class FrameClippingError(InvalidInputError):
    pass


class SuperluminalMotionError(InvalidInputError):
    pass


# ----- measurement -----


class NonOrthonormalBasisError(InvalidInputError):
    pass


class PointerMapError(InvalidInputError):
    pass


class NonUnitaryError(NumericalError):
    pass


class ZeroProbabilityOutcomeError(InvalidInputError):
    pass


class DensitySupportError(InvalidInputError):
    pass


class NonStochasticMatrixError(InvalidInputError):
    pass


# ----- expressions / persistence -----


class ExpressionError(InvalidInputError):
    """Base for expression-language failures; `offset` is a UTF-8 byte offset."""

    def __init__(self, detail: str, *, offset: Optional[int] = None) -> None:
        super().__init__(detail, context={"offset": offset} if offset is not None else None)
        self.offset = offset


class ExpressionSyntaxError(ExpressionError):
    pass


class UnknownIdentifierError(ExpressionError):
    pass


class ArityError(ExpressionError):
    pass


class ExpressionDomainError(ExpressionError):
    pass


class SnapshotFormatError(InvalidInputError):
    pass


class CheckFailedError(LabError):
    """One or more declared scenario checks did not pass."""

    exit_code = EXIT_VALIDATION_FAILURE
