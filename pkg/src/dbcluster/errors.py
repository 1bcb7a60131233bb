"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A shape, hyperparameter, or spec rule was violated."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class ParseError(ValueError):
    """A data file could not be parsed; message names the offset."""
