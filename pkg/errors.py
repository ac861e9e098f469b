"""
CorrFaD error types

Every library error derives from CorrFaDError and from the closest builtin,
so callers can catch either. The `code` attribute is the stable name the CLI
prints on failure.
"""

from typing import Optional


class CorrFaDError(Exception):
    """Base class for all toolkit errors"""

    code = "corrfad-error"


# Image and annotation I/O

class ImageNotFoundError(CorrFaDError, FileNotFoundError):
    code = "image-not-found"


class MalformedHeaderError(CorrFaDError, ValueError):
    code = "malformed-header"


class UnsupportedBitDepthError(CorrFaDError, ValueError):
    code = "unsupported-bit-depth"


class AnnotationError(CorrFaDError, ValueError):
    code = "annotation-error"


class DegenerateInputError(CorrFaDError, ValueError):
    code = "degenerate-input"


class DimensionMismatchError(CorrFaDError, ValueError):
    code = "dimension-mismatch"


# Filter training

class ZeroBinError(CorrFaDError, ValueError):
    code = "zero-bin"


class DivisionDegenerateError(CorrFaDError, ValueError):
    code = "division-degenerate"


class EmptyAccumulatorError(CorrFaDError, ValueError):
    code = "empty-accumulator"


class EmptyCellError(CorrFaDError, ValueError):
    """A bank grid cell received no training samples"""

    code = "empty-cell"

    def __init__(self, octave: float, pose: str, message: Optional[str] = None):
        self.octave = octave
        self.pose = pose
        super().__init__(message or f"no training samples for cell (octave={octave:g}, pose={pose})")


class BankFormatError(CorrFaDError, ValueError):
    code = "bank-format"


class BankTruncatedError(CorrFaDError, ValueError):
    code = "bank-truncated"


class BankIntegrityError(CorrFaDError, ValueError):
    code = "bank-integrity"


# Matching

class SurfaceTooLargeError(CorrFaDError, ValueError):
    code = "surface-too-large"


class TemplateSizeError(CorrFaDError, ValueError):
    code = "template-size"


class ZeroTemplateError(CorrFaDError, ValueError):
    code = "zero-template"


class DegenerateSurfaceError(CorrFaDError, ValueError):
    code = "degenerate-surface"


# Evaluation and corpora

class EmptyTestSetError(CorrFaDError, ValueError):
    code = "empty-test-set"


class IdentityOverlapError(CorrFaDError, ValueError):
    code = "identity-overlap"


class FaceOutOfBoundsError(CorrFaDError, ValueError):
    code = "face-out-of-bounds"


# Configuration

class ConfigConflictError(CorrFaDError, ValueError):
    code = "config-conflict"


class HashMismatchError(CorrFaDError, ValueError):
    code = "hash-mismatch"
