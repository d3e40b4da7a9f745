"""Exception types shared across the package."""


class GapBridgeError(Exception):
    pass


class InvalidInputError(GapBridgeError, ValueError):
    pass


class DegenerateInputError(GapBridgeError, ValueError):
    """Raised when an input carries no usable energy or too few distinct items."""


class UnknownClassError(GapBridgeError, KeyError):
    pass


class CalibrationError(GapBridgeError, RuntimeError):
    def __init__(self, message: str, achieved: tuple[float, float] | None = None):
        super().__init__(message)
        self.achieved = achieved


class RankDeficiencyError(GapBridgeError, ValueError):
    def __init__(self, message: str, rank: int):
        super().__init__(message)
        self.rank = rank


class ConfigError(GapBridgeError, ValueError):
    pass


class TrainingDivergedError(GapBridgeError, RuntimeError):
    pass
