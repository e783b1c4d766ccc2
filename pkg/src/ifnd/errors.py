"""Exception types raised across the package."""


class IFNDError(Exception):
    """Base class for every error raised by ifnd."""


class ZeroRowError(IFNDError, ValueError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has (near) zero norm and cannot be normalized")
        self.row = row


class DimensionMismatch(IFNDError, ValueError):
    pass


class UnnormalizedInput(IFNDError, ValueError):
    pass


class LabelCardinalityMismatch(IFNDError, ValueError):
    pass


class NotApplicable(IFNDError, ValueError):
    pass


class EmptyLevels(IFNDError, ValueError):
    pass


class TooFewSamples(IFNDError, ValueError):
    pass


class EmptyClusterUnrecoverable(IFNDError, RuntimeError):
    pass


class LevelMismatch(IFNDError, ValueError):
    pass


class EpochOutOfRange(IFNDError, ValueError):
    pass


class LengthMismatch(IFNDError, ValueError):
    pass


class DegenerateLabels(IFNDError, ValueError):
    pass


class ShapeMismatch(IFNDError, ValueError):
    pass


class MissingCache(IFNDError, RuntimeError):
    pass


class NonFiniteLoss(IFNDError, FloatingPointError):
    pass


class ConfigError(IFNDError, ValueError):
    pass
