"""Exception hierarchy; each class carries the CLI exit status it maps to."""


class MRPError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(MRPError, ValueError):
    exit_code = 1
    kind = "config"


class FormulaError(ConfigError):
    kind = "formula"

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class DataError(MRPError, ValueError):
    exit_code = 2
    kind = "data"


class DimensionError(DataError):
    kind = "dimension"


class NumericError(MRPError, ArithmeticError):
    exit_code = 3
    kind = "numeric"
