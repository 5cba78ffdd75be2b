"""Exception hierarchy shared across the package.

Every error raised on a documented failure path derives from
:class:`DiarizationError` so the CLI and the HTTP service can map them to
exit codes / status codes uniformly.
"""


class DiarizationError(Exception):
    """Base class for all package-specific errors."""

    kind = "error"


class InvalidInputError(DiarizationError):
    """An argument violates a documented precondition."""

    kind = "invalid-input"


class ConfigError(DiarizationError):
    """Model/run configuration is inconsistent or incompatible."""

    kind = "config"


class ConstraintViolationError(DiarizationError):
    """Constrained clustering could not satisfy a cannot-link constraint."""

    kind = "constraint-violation"


class TrainingDivergenceError(DiarizationError):
    """A loss became non-finite during training."""

    kind = "training-divergence"


class DataError(DiarizationError):
    """Corpus or dataset contents are unusable."""

    kind = "data"


class ParseError(DiarizationError):
    """A text file (RTTM, manifest, config) is malformed."""

    kind = "parse"

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class InternalInvariantError(DiarizationError):
    """An internal consistency check failed; indicates a bug."""

    kind = "internal-invariant"
