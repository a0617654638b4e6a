"""Exception hierarchy shared by every fes module.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`DataError`
to exit code 3.
"""


class FesError(Exception):
    """Base class for all errors raised by fes."""


class ConfigError(FesError, ValueError):
    """Invalid parameter or configuration value."""


class DataError(FesError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class EmptyMatrixError(DataError):
    """A matrix has no valid entry to anchor imputation."""


class InsufficientClusterError(DataError):
    """A cluster matrix is too small to train a stage-1 network."""


class ColdStartError(FesError):
    """A cold-start entity cannot be assigned without context information."""


class StaleModelError(FesError):
    """A fused model was trained against a different clustering."""


class TrainingDivergedError(FesError, ArithmeticError):
    """NaN or infinity appeared during training."""

    def __init__(self, message, epoch):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")
