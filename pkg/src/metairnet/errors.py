"""Exception types. Each maps to a CLI exit code."""


class MetaIRNetError(Exception):
    exit_code = 1


class ConfigError(MetaIRNetError, ValueError):
    exit_code = 1


class DataError(MetaIRNetError, ValueError):
    exit_code = 2


class NumericalError(MetaIRNetError, ArithmeticError):
    exit_code = 3
