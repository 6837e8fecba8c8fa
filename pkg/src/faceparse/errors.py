"""Exception hierarchy. Each class maps to one CLI exit code."""


class FaceParseError(Exception):
    kind = "error"
    exit_code = 1


class ConfigError(FaceParseError, ValueError):
    kind = "config"
    exit_code = 2


class FormatError(FaceParseError, ValueError):
    kind = "format"
    exit_code = 3


class ShapeError(FaceParseError, ValueError):
    kind = "shape"
    exit_code = 4


class DataError(FaceParseError, ValueError):
    kind = "data"
    exit_code = 5


class NumericError(FaceParseError, ArithmeticError):
    kind = "numeric"
    exit_code = 6


class StateError(FaceParseError, RuntimeError):
    kind = "state"
    exit_code = 7
