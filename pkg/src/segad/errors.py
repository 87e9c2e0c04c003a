"""Exception hierarchy.

Validation and format problems subclass ``ValueError``, missing or unreadable
files subclass ``OSError``; the CLI maps these families to exit codes.
"""


class SegadError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SegadError, ValueError):
    """Inputs violate a documented precondition or invariant."""


class ManifestParseError(ValidationError):
    pass


class InconsistencyError(ValidationError):
    pass


class DuplicateIdError(ValidationError):
    pass


class InsufficientSamplesError(ValidationError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class SegmentIndexError(ValidationError, IndexError):
    pass


class EmptyInputError(ValidationError):
    pass


class SingleClassError(ValidationError):
    pass


class FormatError(ValidationError):
    """A file does not follow its binary or text format."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"non-finite value at pixel index {index}")


class SegmentGapError(FormatError):
    pass


class ModelParseError(FormatError):
    pass


class ModelVersionError(FormatError):
    pass


class SampleIOError(SegadError, OSError):
    """A file referenced by a manifest sample could not be read."""

    def __init__(self, sample_id: str, path, cause: BaseException):
        self.sample_id = sample_id
        self.path = path
        super().__init__(f"sample {sample_id!r}: cannot read {path}: {cause}")


class InvariantError(SegadError, AssertionError):
    """An internal consistency check failed."""
