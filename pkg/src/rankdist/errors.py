"""Exception hierarchy shared by every module."""


class RankDistError(Exception):
    """Base class for all domain errors raised by rankdist."""


class UnsupportedFormat(RankDistError, ValueError):
    pass


class CorruptData(RankDistError, ValueError):
    pass


class DimensionMismatch(RankDistError, ValueError):
    pass


class OutOfBounds(RankDistError, ValueError):
    pass


class EmptyInput(RankDistError, ValueError):
    pass


class LengthMismatch(RankDistError, ValueError):
    pass


class DegenerateInput(RankDistError, ValueError):
    pass


class ShiftTooLarge(RankDistError, ValueError):
    pass


class InvalidSpec(RankDistError, ValueError):
    pass


class FactorOutOfRange(RankDistError, ValueError):
    pass


class ImageTooSmall(RankDistError, ValueError):
    pass


class NoQualifyingRoi(RankDistError):
    pass


class UnknownArch(RankDistError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyBatch(RankDistError, ValueError):
    pass


class EmptySplit(RankDistError, ValueError):
    pass


class DivergenceDetected(RankDistError, FloatingPointError):
    pass


class VersionMismatch(RankDistError, ValueError):
    pass


class ShapeMismatch(RankDistError, ValueError):
    pass


class DegenerateMatrix(RankDistError, ValueError):
    pass


class InsufficientImages(RankDistError, ValueError):
    pass


class EmptyRois(RankDistError, ValueError):
    pass


class ManifestError(RankDistError, ValueError):
    """A manifest line could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
