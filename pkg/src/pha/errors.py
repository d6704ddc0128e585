"""Exception types shared across the package."""


class PhaError(Exception):
    """Base class for package-specific errors."""


class DimensionError(PhaError):
    """Operand shapes are incompatible."""


class ContractError(PhaError):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(PhaError):
    """Input is structurally valid but numerically degenerate (e.g. zero norm)."""


class DeterminismError(PhaError):
    """A function that must be deterministic returned differing results."""


class TokenizationError(PhaError):
    """Text contains characters outside the tokenizer alphabet."""


class ConfigError(PhaError):
    """Configuration document is invalid; message names the offending field."""


class TrainingDivergedError(PhaError):
    """Training aborted on a non-finite loss.

    ``last_checkpoint`` points at the most recent good checkpoint, or None
    if none was written before the abort.
    """

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
