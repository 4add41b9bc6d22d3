"""Exception hierarchy shared across the package."""


class M3SError(Exception):
    pass


class ConfigError(M3SError, ValueError):
    """Invalid configuration or shape mismatch."""


class DataError(M3SError, ValueError):
    """Malformed or inconsistent input data."""


class PoolingError(DataError):
    """A masked reduction had no unmasked element."""


class NumericError(M3SError, ArithmeticError):
    """An operator produced NaN/Inf or hit a singular case."""

    def __init__(self, op, message="non-finite output"):
        self.op = op
        super().__init__(f"{op}: {message}")


class ContractViolation(M3SError, RuntimeError):
    pass


class CheckpointError(M3SError, IOError):
    pass
