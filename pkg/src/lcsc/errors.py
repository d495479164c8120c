"""Exception hierarchy shared by every module."""


class LcscError(Exception):
    """Base class for all library errors."""


class InvalidArgument(LcscError, ValueError):
    pass


class MissingFile(LcscError, FileNotFoundError):
    pass


class UnsupportedFormat(LcscError):
    pass


class CorruptData(LcscError):
    pass


class EmptyIntersection(LcscError):
    pass


class ImageTooSmall(LcscError):
    pass


class OutOfBounds(LcscError, IndexError):
    pass


class DimensionMismatch(LcscError, ValueError):
    pass


class DegenerateSystem(LcscError):
    pass


class ExhaustedSamples(LcscError):
    pass


class SingleClass(LcscError, ValueError):
    pass


class NonFiniteInput(LcscError, ValueError):
    pass


class LayoutMismatch(LcscError):
    pass


class InconsistentLayout(LcscError):
    pass


class NoEyeVisible(LcscError):
    pass


class EmptyTrainingSet(LcscError):
    pass


class InvalidBox(LcscError, ValueError):
    pass


class InsufficientSamples(LcscError):
    pass


class UnfittedModel(LcscError):
    pass


class NoValidDescriptors(LcscError):
    pass


class ManifestError(LcscError):
    """Manifest problem tied to a 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ParseError(ManifestError):
    pass


class MissingField(ManifestError):
    def __init__(self, line: int, field: str):
        super().__init__(line, f"missing field {field!r}")
        self.field = field
