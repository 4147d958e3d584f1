"""Exception taxonomy shared across the package.

CLI exit-code mapping: InputError and its subclasses exit 2, NumericError
exits 3. Everything else is a bug and propagates.
"""


class InputError(ValueError):
    """Caller passed something structurally invalid (shape, range, path)."""


class ConfigError(InputError):
    """A configuration field is missing, malformed, or out of range."""


class DomainError(InputError):
    """A value left the mathematical domain of an operation (e.g. log of a
    boundary simplex point)."""


class FormatError(InputError):
    """A serialized artifact (checkpoint, config file) failed validation."""


class NumericError(RuntimeError):
    """A non-finite value appeared mid-computation.

    Carries enough context (step or layer) to locate the blow-up.
    """

    def __init__(self, message: str, step: int | None = None,
                 last_checkpoint: str | None = None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint
