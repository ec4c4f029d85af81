class VipoLabError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(VipoLabError, ValueError):
    """Arguments violate an operation's preconditions."""


class ConfigError(InvalidInputError):
    """Unknown or malformed configuration keys."""


class ParseError(InvalidInputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConvergenceError(VipoLabError, RuntimeError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (final residual {residual:.3e})")


class DivergenceError(VipoLabError, RuntimeError):
    """A loss, gradient or logged scalar became non-finite."""
