"""Exception hierarchy shared by every module."""

from typing import List, Sequence


class B2BError(Exception):
    """Base class for all errors raised by b2b_guidance."""


class ContractViolation(B2BError, ValueError):
    """A precondition of an operation does not hold (shapes, dimensions, ranges)."""


class ConfigError(B2BError, ValueError):
    """Invalid run configuration."""


class LayoutParseError(B2BError):
    """The layout document is not well-formed."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class LayoutValidationError(B2BError):
    """The layout document parsed but violates one or more invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations: List[str] = list(violations)
        listing = "; ".join(self.violations)
        super().__init__(f"{len(self.violations)} layout violation(s): {listing}")


class NumericalError(B2BError, ArithmeticError):
    """A non-finite value appeared while computing a reward or its gradient."""

    def __init__(self, term: str, message: str = "non-finite value"):
        self.term = term
        super().__init__(f"{term}: {message}")


class SamplingAborted(B2BError):
    """The latent became non-finite during sampling."""

    def __init__(self, timestep: int):
        self.timestep = timestep
        super().__init__(f"latent became non-finite at timestep {timestep}")
