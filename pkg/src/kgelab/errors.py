"""Exception hierarchy. Each family maps to one CLI exit code."""


class KGLabError(Exception):
    exit_code = 1


class ConfigError(KGLabError, ValueError):
    """Invalid configuration or unsatisfied precondition on user input."""

    exit_code = 1


class ContractError(KGLabError, ValueError):
    """Caller handed mismatched arguments to a library function."""

    exit_code = 1


class DataError(KGLabError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class SchemaError(DataError):
    pass


class TypeConflictError(SchemaError):
    pass


class DictionaryError(DataError):
    pass


class SamplingExhaustedError(DataError):
    pass


class DivergenceError(KGLabError):
    exit_code = 3

    def __init__(self, epoch, learning_rate, loss):
        self.epoch = epoch
        self.learning_rate = learning_rate
        self.loss = loss
        super().__init__(
            f"training diverged at epoch {epoch} (learning_rate={learning_rate:g}, loss={loss})"
        )
