"""Exception types. Each maps to a distinct CLI exit code."""


class DmporecError(Exception):
    exit_code = 1


class ConfigError(DmporecError):
    exit_code = 2


class DataError(DmporecError):
    exit_code = 3


class NumericError(DmporecError):
    exit_code = 4


class InsufficientNegatives(DataError):
    pass


class SequenceTooLong(ValueError):
    pass
