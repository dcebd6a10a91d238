"""Exception hierarchy shared by every module."""


class SsbverError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SsbverError):
    """Invalid configuration value or unknown configuration key."""


class IoError(SsbverError):
    """Failed filesystem read/write that is not a data-format problem."""


class ParseError(SsbverError):
    """Malformed manifest line or record."""


class SplitError(SsbverError):
    """Query identity without a reachable gallery match."""


class MissingFileError(SsbverError):
    """Referenced file could not be resolved on disk."""


class DataError(SsbverError):
    """Dataset does not satisfy the preconditions of an operation."""


class BatchLayoutError(SsbverError):
    """Batch size inconsistent with the identities-per-batch layout."""


class IdentityCountError(SsbverError):
    """An identity appears with the wrong number of instances in a batch."""


class ShapeMismatchError(SsbverError):
    """Paired parameter lists disagree in length or element shape."""


class DegenerateBatchError(SsbverError):
    """Batch too small for batch statistics."""


class MiningError(SsbverError):
    """An anchor has an empty positive or negative set."""


class RangeError(SsbverError):
    """Scalar argument outside its documented range."""


class EmptyPairError(SsbverError):
    """View bundle yields no teacher/student pairs."""


class NonFiniteLossError(SsbverError):
    """A loss value became NaN or infinite during training."""


class NoMatchError(SsbverError):
    """A query has no valid match in the filtered gallery."""


class DegenerateError(SsbverError):
    """Input lacks the variety the analysis requires."""
