"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto exit codes
(configuration 2, data 3, numeric 4).
"""


class EegAdvError(Exception):
    exit_code = 1


class ConfigError(EegAdvError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    pass


class DataError(EegAdvError, ValueError):
    exit_code = 3


class InputShapeError(DataError):
    pass


class LabelError(DataError):
    pass


class HeaderError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class LabelRangeError(LabelError):
    pass


class NumericError(EegAdvError, ArithmeticError):
    exit_code = 4


class DegenerateGeometryError(NumericError):
    pass
