"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems are ``InvalidArgumentError``
(1), malformed input files are ``ParseError`` (2), and numerical breakdowns are
``NumericalError`` (3).
"""


class InvalidArgumentError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class ParseError(ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
