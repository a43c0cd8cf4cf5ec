"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when inputs or settings violate a documented precondition."""


class UsageError(RuntimeError):
    """Raised when the API is called out of order (e.g. backward before forward)."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss stops being finite; the run must abort."""
