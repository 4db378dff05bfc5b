"""Exception types raised across the package."""


class HvpError(Exception):
    """Base class for all package errors."""


class DimensionError(HvpError, ValueError):
    pass


class ParameterError(HvpError, ValueError):
    pass


class ContractError(HvpError, RuntimeError):
    pass


class NumericError(HvpError, ArithmeticError):
    pass


class ScheduleError(HvpError, ValueError):
    pass


class ToleranceError(HvpError, RuntimeError):
    pass


class ConfigError(HvpError, ValueError):
    pass
