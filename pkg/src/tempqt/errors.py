"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes violate an operation's contract."""


class ArgumentError(ValueError):
    """An argument value is outside an operation's domain."""


class ParseError(ValueError):
    """Malformed image file. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MetricError(ValueError):
    """A metric is undefined for the given inputs (degenerate data)."""


class DataError(ValueError):
    """A dataset manifest or sample violates a structural invariant."""


class TrainingError(RuntimeError):
    """The training loop hit an inconsistent state (e.g. missing grads)."""


class CompatibilityError(ValueError):
    """A checkpoint does not match the requested configuration."""

    def __init__(self, message: str, fields: tuple = ()):
        if fields:
            message = f"{message}: {', '.join(fields)}"
        super().__init__(message)
        self.fields = tuple(fields)


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or unsupported."""
