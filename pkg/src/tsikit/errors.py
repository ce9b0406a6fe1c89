"""Exception hierarchy shared across the toolkit.

Every contract violation raises a named error so callers (and the CLI exit-code
mapping) can distinguish bad input from bad schema without string matching.
"""


class TsikitError(Exception):
    """Base class for all toolkit errors."""


# --- geometry ---------------------------------------------------------------

class NonDivisibleError(TsikitError):
    """Patch size does not evenly divide an image dimension."""


class IndexOutOfRangeError(TsikitError):
    """Token index outside [0, n_tokens)."""


class EmptyAnnotationError(TsikitError):
    """No bounding box survives clipping to the image bounds."""


# --- model / engine ---------------------------------------------------------

class DimensionMismatchError(TsikitError):
    """Pixel buffer does not match the token grid."""


class EmptyTokenSetError(TsikitError):
    """A predictor was asked to evaluate an empty token set."""


class InvalidConfigError(TsikitError):
    """Model configuration violates its own constraints."""


class BadCountError(TsikitError):
    """Requested token count outside the valid range."""


class EmptyRemainderError(TsikitError):
    """Discard set equals the full token set."""


# --- record / corpus I/O ----------------------------------------------------

class SchemaViolationError(TsikitError):
    """A serialized record does not conform to its schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NegativeScoreError(SchemaViolationError):
    """A score record carries a negative score."""


class LengthMismatchError(SchemaViolationError):
    """A score record's score count disagrees with its grid."""


class UnknownModelIdError(TsikitError):
    """A manifest record references a model id absent from the corpus header."""


class DanglingAnnotationError(TsikitError):
    """A manifest record references an annotation that cannot be resolved."""


# --- annotation parsing -----------------------------------------------------

class MalformedXmlError(TsikitError):
    """Annotation document is not well-formed XML or lacks object nodes."""


class MissingFieldError(TsikitError):
    """Annotation object lacks a required field."""


class InvertedBoxError(TsikitError):
    """Annotation box has max < min on some axis."""


# --- metrics / analysis -----------------------------------------------------

class GridMismatchError(TsikitError):
    """Influence map and partition were built on different grids."""


class OutOfRangeError(TsikitError):
    """Value falls outside the domain of a binning rule."""


class EmptyInputError(TsikitError):
    """An aggregate was asked to reduce an empty sequence."""


class ConstantSeriesError(TsikitError):
    """Pearson correlation is undefined for a constant series."""


class BadBinSpecError(TsikitError):
    """Histogram bin width / clamp specification is inconsistent."""


class MissingScoresError(TsikitError):
    """A score source does not cover a requested image."""
