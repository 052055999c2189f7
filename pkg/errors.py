"""
Exception hierarchy shared by every convadapt module.

Library code raises these; only the experiment grid loop and the CLI catch
them, log them and turn them into an exit status.
"""


class ConvAdaptError(Exception):
    """Base class for all errors raised by convadapt."""


class DimensionError(ConvAdaptError, ValueError):
    """A tensor shape does not fit the operation; the message names the axis."""


class CorruptionError(ConvAdaptError):
    """An index map points outside the tensor it is meant to address."""


class ConfigError(ConvAdaptError, ValueError):
    """Invalid hyperparameter, missing path or unsatisfiable data request."""


class UsageError(ConvAdaptError):
    """An operation was called on the wrong kind of object."""


class TransferError(ConvAdaptError):
    """A prior model cannot be transferred into the target network."""


class FormatError(ConvAdaptError):
    """A dataset file violates its binary or text format."""


class LeakageError(FormatError):
    """A piece of music appears in more than one data partition."""


class CheckpointError(ConvAdaptError):
    """Base class for checkpoint load failures."""


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    """The checkpoint's parameters do not fit the network the caller expects."""


class TrainingAbortedError(ConvAdaptError):
    """Training produced a non-finite gradient."""
