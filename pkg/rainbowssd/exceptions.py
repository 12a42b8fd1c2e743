EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class RainbowSSDException(Exception):
    """
    Generic base exception for any expected failure in rainbowssd. If the
    exception raises to the top level the CLI will print a single error line
    and exit with the passed exit_code.
    """

    kind = "error"

    def __init__(self, msg: str, *, exit_code: int = 1) -> None:
        super().__init__(msg)
        self.exit_code = exit_code


class ConfigError(RainbowSSDException):
    """Invalid configuration, stage plan or box layout"""

    kind = "config"

    def __init__(self, msg: str, *, exit_code: int = EXIT_CONFIG) -> None:
        super().__init__(msg, exit_code=exit_code)


class DimensionError(ConfigError):
    """Tensor shapes that do not agree along some axis"""


class DataError(RainbowSSDException):
    """Any exception relating to dataset, annotation or detection data"""

    kind = "data"

    def __init__(self, msg: str, *, exit_code: int = EXIT_DATA) -> None:
        super().__init__(msg, exit_code=exit_code)


class ParseError(DataError):
    """A malformed line in one of the text formats"""

    def __init__(self, msg: str, *, line_number: int = 0) -> None:
        if line_number:
            msg = f"line {line_number}: {msg}"
        super().__init__(msg)
        self.line_number = line_number


class ValidationError(DataError):
    """Well-formed data that violates a semantic constraint"""


class GenerationError(DataError):
    """Synthetic data generation could not satisfy its spec"""


class NumericError(RainbowSSDException):
    """Non-finite values encountered during training or evaluation"""

    kind = "numeric"

    def __init__(self, msg: str, *, exit_code: int = EXIT_NUMERIC) -> None:
        super().__init__(msg, exit_code=exit_code)


class GradientLookupError(RainbowSSDException, KeyError):
    """A gradient was requested for a tensor that was never recorded"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""
