"""Exception hierarchy shared by every subsystem."""


class FtRobustError(Exception):
    """Base class for all library errors."""


class DimensionError(FtRobustError, ValueError):
    """Operand shapes are incompatible."""


class RankError(DimensionError):
    """Operand has the wrong number of dimensions."""


class ContractError(FtRobustError, RuntimeError):
    """A call violated a documented precondition."""


class ConfigError(FtRobustError, ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DataError(FtRobustError, ValueError):
    pass


class AttackError(FtRobustError, RuntimeError):
    pass


class AnalysisError(FtRobustError, ValueError):
    pass


class DivergenceError(FtRobustError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
