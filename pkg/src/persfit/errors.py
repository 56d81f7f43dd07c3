"""Exception types raised across the package."""


class PersfitError(Exception):
    """Base class for all library errors."""


class DomainError(PersfitError, ValueError):
    pass


class NonInvertible(PersfitError, ValueError):
    """A distorted point lies outside the invertible radius of the lens model."""


class GimbalLock(PersfitError, ValueError):
    pass


class DegeneratePixel(PersfitError, ValueError):
    """The pixel coincides with the vanishing point of gravity."""


class DimensionMismatch(PersfitError, ValueError):
    pass


class SingularSystem(PersfitError, ArithmeticError):
    pass


class DegenerateHeuristic(PersfitError, ValueError):
    pass


class InsufficientSamples(PersfitError, ValueError):
    pass


class NoHypothesis(PersfitError, RuntimeError):
    pass


class EmptyProblem(PersfitError, ValueError):
    pass


class FieldFormatError(PersfitError, ValueError):
    """Malformed ``.pfld``, ``.cam`` or ``.grav`` content."""


class BadMagic(FieldFormatError):
    pass


class TruncatedFile(FieldFormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated file: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class InvariantViolation(FieldFormatError):
    def __init__(self, message: str, index: tuple[int, int] | None = None):
        if index is not None:
            message = f"{message} at pixel (x={index[0]}, y={index[1]})"
        super().__init__(message)
        self.index = index


class TrailingBytes(FieldFormatError):
    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"expected {expected} bytes, found {actual} (trailing data)")


class RecordFormatError(FieldFormatError):
    """Malformed camera or gravity text record."""


class EmptyInput(PersfitError, ValueError):
    """A metric was asked to summarize no samples."""
