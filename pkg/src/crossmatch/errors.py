"""Exception hierarchy shared by every module."""


class CrossMatchError(Exception):
    exit_code = 2


class DimensionError(CrossMatchError, ValueError):
    pass


class DegenerateInputError(CrossMatchError, ValueError):
    pass


class ContractError(CrossMatchError, ValueError):
    pass


class NumericalError(CrossMatchError, FloatingPointError):
    exit_code = 3


class ParseError(CrossMatchError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
