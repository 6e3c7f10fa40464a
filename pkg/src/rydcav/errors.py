"""Exception types shared across the package."""


class RydcavError(Exception):
    """Base class for all package errors."""


class ConfigError(RydcavError, ValueError):
    """Invalid run configuration. ``field`` names the offending dotted key."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class ConvergenceError(RydcavError, RuntimeError):
    """A solver failed to converge; ``diagnostics`` holds what it saw."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class SingularSystemError(ConvergenceError):
    """The Liouvillian admits more than one steady state."""

    def __init__(self, message, null_dim=None, diagnostics=None):
        self.null_dim = null_dim
        super().__init__(message, diagnostics)


class DimensionCapError(RydcavError, ValueError):
    """Requested Hilbert space exceeds the configured size cap."""

    def __init__(self, message, total=None, cap=None):
        self.total = total
        self.cap = cap
        super().__init__(message)
