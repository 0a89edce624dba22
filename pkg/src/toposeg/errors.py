"""Exception types shared across modules.

Plain argument errors are raised as :class:`ValueError`; the classes here
mark the failure kinds that the CLI maps to distinct exit codes.
"""


class InvalidConfig(ValueError):
    """A configuration value is missing, malformed or out of range."""


class UndefinedDimension(ValueError):
    """A box-counting dimension was requested from a zero count."""


class NonFiniteLoss(FloatingPointError):
    """A training step produced a NaN/Inf loss; ``diagnostics`` holds the dump."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
