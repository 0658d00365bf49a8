"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems exit 1, data and
checkpoint problems exit 2, numerical failures exit 3.
"""


class CovctError(Exception):
    """Base class for all package errors."""

    kind = "error"


class ShapeError(CovctError, ValueError):
    kind = "shape"


class ParameterError(CovctError, ValueError):
    kind = "parameter"


class DegenerateBatchError(ShapeError):
    kind = "degenerate_batch"


class CorruptIndexError(CovctError, IndexError):
    kind = "corrupt_index"


class EmptyTapeError(CovctError, RuntimeError):
    kind = "empty_tape"


class NumericalError(CovctError, ArithmeticError):
    """NaN/inf encountered during forward or training."""

    kind = "numerical"


class BuilderError(CovctError, ValueError):
    kind = "builder"


class DataError(CovctError):
    """Unreadable, malformed or inconsistent input data."""

    kind = "data"


class ManifestError(DataError):
    kind = "manifest"


class CheckpointError(DataError):
    kind = "checkpoint"


class BadMagicError(CheckpointError):
    kind = "bad_magic"


class VersionMismatchError(CheckpointError):
    kind = "version_mismatch"


class TruncatedCheckpointError(CheckpointError):
    kind = "truncated"


class ConfigHashError(CheckpointError):
    kind = "config_hash"


class MetricError(CovctError, ValueError):
    kind = "metric"
