"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class OvvadError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(OvvadError):
    """Bad command line or configuration input."""


class DataError(OvvadError):
    """Corrupt or inconsistent files: features, manifests, sidecars."""


class NumericalError(OvvadError):
    """Divergence, degenerate values, or a failed gradient check."""
