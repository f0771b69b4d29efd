"""Exception hierarchy shared across the package.

The CLI maps :class:`DataError` to exit code 2 and :class:`ModelError` to
exit code 3; everything else that escapes is a bug.
"""


class RobustScoreError(Exception):
    """Base class for all package errors."""


class DataError(RobustScoreError, ValueError):
    """Bad input data: malformed files, empty datasets, shape problems."""


class ModelError(RobustScoreError):
    """Failures talking to or evaluating a classifier."""


class PnmError(DataError):
    """A PNM byte stream could not be decoded.

    ``offset`` is the byte position at which parsing gave up.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MalformedHeader(PnmError):
    pass


class UnsupportedMagic(PnmError):
    pass


class TruncatedPixelData(PnmError):
    pass


class ZeroMaxval(PnmError):
    pass


class ShapeMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class EmptyDataset(DataError):
    pass


class SingleClassTrainingSet(DataError):
    pass


class SingleClassModel(DataError):
    pass


class LengthMismatch(DataError):
    pass


class GridTooSmall(DataError):
    pass


class LevelOutOfRange(DataError):
    pass


class EmptyPool(DataError):
    pass


class NoModels(DataError):
    pass


class MaxEpsilonExceeded(RobustScoreError):
    """AMP scan reached ``epsilon_max`` without hitting the threshold."""

    def __init__(self, epsilon_max, threshold, best_fraction):
        super().__init__(
            f"no epsilon <= {epsilon_max} fools a fraction >= {threshold} "
            f"of the dataset (best fraction seen: {best_fraction:.4f})"
        )
        self.epsilon_max = epsilon_max
        self.threshold = threshold
        self.best_fraction = best_fraction


class ProcessSpawnFailure(ModelError):
    pass


class ProtocolViolation(ModelError):
    pass


class ChildError(ModelError):
    pass
