"""Exception types; the command line maps each to an exit code."""


class TrdynError(Exception):
    exit_code = 1


class ConfigError(TrdynError, ValueError):
    exit_code = 2


class DataError(TrdynError, ValueError):
    exit_code = 3


class NumericalError(TrdynError, ArithmeticError):
    exit_code = 4
