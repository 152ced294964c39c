"""Exception types shared across the package."""


class HingeAxesError(Exception):
    """Base class for all package-specific errors."""


class DataError(HingeAxesError):
    """Malformed or unparseable input data."""


class ValidationError(HingeAxesError):
    """Input that parses but violates a documented precondition."""


class DomainError(ValidationError):
    """Angle or geometry argument outside its admissible range."""


class GimbalLockError(DomainError):
    """Cardan decomposition attempted at or within tolerance of gimbal lock."""


class ConditioningError(HingeAxesError):
    """A linear system or derivative is too ill-conditioned to trust."""


class ConvergenceError(HingeAxesError):
    """An iterative fit failed to converge and no usable result exists."""
