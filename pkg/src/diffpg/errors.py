"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
domain and numerical problems exit with 1.
"""


class DiffpgError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DiffpgError):
    """Malformed, unknown, or out-of-range configuration input."""


class DomainError(DiffpgError):
    """Input outside an operation's mathematical domain."""


class CapacityError(DomainError):
    """State space too large for a dense enumeration oracle."""


class StepSizeError(DomainError):
    """A discretization step produced an invalid probability."""


class SingularSystemError(DomainError):
    """A linear solve hit a numerically singular denominator."""
