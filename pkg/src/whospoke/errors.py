"""Exception types shared across the package."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite or degenerate value."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class UnsupportedSizeError(ValueError):
    """Exact search requested on an instance above the enumeration caps."""


class ParseError(ValueError):
    """Malformed line in an RTTM or JSONL file."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class OracleMismatchError(AssertionError):
    """A solver disagreed with its brute-force oracle."""
