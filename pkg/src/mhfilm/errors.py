"""Exception types shared across the package."""


class MHFilmError(Exception):
    """Base class for all package errors."""


class DimensionError(MHFilmError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(MHFilmError, ValueError):
    """An input lies outside the domain of a function (e.g. log of a non-positive value)."""


class BackwardError(MHFilmError, RuntimeError):
    """Invalid use of the gradient tape."""


class ConfigError(MHFilmError, ValueError):
    """Inconsistent configuration or hyperparameters."""


class StateError(MHFilmError, RuntimeError):
    """An operation was applied in an invalid state (e.g. too many context hops)."""


class InputError(MHFilmError, ValueError):
    """Malformed user-provided input (tokens, questions, boxes)."""


class GenerationError(MHFilmError, RuntimeError):
    """A synthetic game could not be generated under the requested constraints."""


class DatasetParseError(MHFilmError, ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class TrainingError(MHFilmError, RuntimeError):
    """Training diverged or produced non-finite values."""


class CheckpointError(MHFilmError, ValueError):
    """A checkpoint is corrupted or does not match the requested architecture."""
