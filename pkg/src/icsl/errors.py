"""Exception hierarchy; each failure class maps to a distinct CLI exit code."""


class ICSLError(Exception):
    exit_code = 1


class ConfigError(ICSLError, ValueError):
    exit_code = 2


class DataError(ICSLError, ValueError):
    exit_code = 3


class NumericError(ICSLError, FloatingPointError):
    exit_code = 4
