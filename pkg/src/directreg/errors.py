"""Exception types raised across the package."""


class DirectRegError(Exception):
    """Base class for all package errors."""


class DegenerateConfiguration(DirectRegError):
    pass


class EmptySet(DirectRegError):
    pass


class ZeroQuaternion(DirectRegError):
    pass


class TooFewPoints(DirectRegError):
    pass


class EmptyNeighborhood(DirectRegError):
    pass


class ShapeMismatch(DirectRegError):
    pass


class EmptyInput(DirectRegError):
    pass


class VariantMismatch(DirectRegError):
    pass


class NoOverlap(DirectRegError):
    pass


class EmptyTarget(DirectRegError):
    pass


class EmptyCorrespondences(DirectRegError):
    pass


class TooFewCorrespondences(DirectRegError):
    pass


class InvalidSpec(DirectRegError):
    pass


class UnsupportedFormat(DirectRegError):
    pass


class ParseError(DirectRegError):
    """Malformed point-cloud file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
