"""Exception hierarchy shared by every module."""


class SparseAEError(Exception):
    """Base class for all errors raised by sparseae."""


class OutOfRange(SparseAEError):
    pass


class DuplicateSite(SparseAEError):
    pass


class DimensionMismatch(SparseAEError):
    pass


class TooLarge(SparseAEError):
    pass


class BadGeometry(SparseAEError):
    pass


class EvenFilter(SparseAEError):
    pass


class ShapeMismatch(SparseAEError):
    pass


class MissingPattern(SparseAEError):
    pass


class PatternNotSubset(SparseAEError):
    pass


class PatternMismatch(SparseAEError):
    pass


class EmptyInput(SparseAEError):
    pass


class SpecInvalid(SparseAEError):
    pass


class SpecMismatch(SparseAEError):
    pass


class ParseError(SparseAEError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DegenerateSample(SparseAEError):
    pass


class EmptyCloud(SparseAEError):
    pass


class ConfigError(SparseAEError):
    pass


class CheckpointError(SparseAEError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass
