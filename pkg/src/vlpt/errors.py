"""Shared exception types. Callers are expected to catch the typed signals
(EmptySceneError, SequenceTooShort, NothingToPredict) and fall back; the rest
indicate contract violations or bad inputs."""


class VlptError(Exception):
    """Base class for all package errors."""


class ShapeError(VlptError):
    """Operands have incompatible shapes or lengths."""


class NumericError(VlptError):
    """NaN/Inf encountered, or an input outside the numeric domain."""


class ContractError(VlptError):
    """An operation was called in a state its contract forbids."""


class ConfigError(VlptError):
    """Invalid configuration values."""


class InputError(VlptError):
    """Malformed input data (degenerate boxes, empty corpus, ...)."""


class EmptySceneError(VlptError):
    """All regions of a scene were filtered out; the sample is dropped."""


class SequenceTooShort(VlptError):
    """Sequence interior too short for fragment sampling; caller falls back
    to bidirectional masking."""


class NothingToPredict(VlptError):
    """A loss was asked to score an empty plan/target; caller skips it."""


class CheckpointError(VlptError):
    """Unreadable, corrupted, or version-mismatched checkpoint file."""
