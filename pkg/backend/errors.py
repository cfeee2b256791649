"""
Exception hierarchy for polarsep.

Three families, each mapped to its own process exit status by the CLI:
validation problems (bad shapes, bad patterns, bad light sets), I/O problems
(unreadable or malformed files) and numerical problems (unidentifiable phase,
nothing left to evaluate).
"""


class PolarsepError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


# --- VALIDATION (exit 2) ---

class ValidationError(PolarsepError, ValueError):
    exit_code = 2


class ShapeError(ValidationError):
    """Images, arrays or stacks whose dimensions do not line up."""


class PatternError(ValidationError):
    """Filter-array layouts that cannot be built or are inconsistent."""


class OperatorSizeError(ValidationError):
    """Dense oracle requested for an image above the size guard."""


class SingularSystemError(ValidationError):
    """Per-pixel cosine fit or interpolation system without a unique solution."""


class LightConfigurationError(ValidationError):
    """Fewer than three lights, or a light matrix of rank below three."""


class MissingInputError(ValidationError):
    """A manifest or flag refers to an input that was not provided."""


# --- I/O (exit 3) ---

class PolarsepIOError(PolarsepError, OSError):
    exit_code = 3


class PfmFormatError(PolarsepIOError):
    """Base for Portable Float Map decoding failures."""


class PfmHeaderError(PfmFormatError):
    """Identifier, dimension or scale line could not be parsed."""


class PfmDimensionError(PfmFormatError):
    """Header dimensions are non-positive or exceed the supported maximum."""


class PfmTruncatedError(PfmFormatError):
    """Payload shorter than the header promises."""


class PngFormatError(PolarsepIOError):
    """PNG with an unsupported mode or bit depth."""


# --- NUMERICAL (exit 4) ---

class NumericalError(PolarsepError, ArithmeticError):
    exit_code = 4


class UnidentifiablePhaseError(NumericalError):
    """Specular mean too small for the light phase to be recovered."""


class NoValidPixelsError(NumericalError):
    """Two normal maps share no jointly valid pixel."""
