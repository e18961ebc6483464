"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES).
"""


class ThoraxGenError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ThoraxGenError):
    """Invalid configuration value or precondition violation."""


class DimensionError(ThoraxGenError):
    """Mismatched array shapes or channel counts."""


class LabelDomainError(ThoraxGenError):
    """Semantic layout contains labels outside {background, lung, nodule}."""


class MaskDomainError(ThoraxGenError):
    """A mask that must be binary is not."""


class FormatError(ThoraxGenError):
    """Malformed volume/layout file (header or blob)."""


class NumericHealthError(ThoraxGenError):
    """Non-finite values encountered where finiteness is required."""


class InsufficientDataError(ThoraxGenError):
    """Too few samples/folds/points for the requested computation."""


class GenerationError(ThoraxGenError):
    """Phantom geometry cannot be realized with the given parameters."""


class PersistedStateError(ThoraxGenError):
    """Checkpoint or output files could not be written or read back."""
