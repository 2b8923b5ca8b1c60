"""Exception hierarchy shared by every stage of the pipeline."""


class WestError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(WestError, ValueError):
    """Invalid configuration value; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class MissingArtifact(WestError, FileNotFoundError):
    pass


class NumericFailure(WestError, ArithmeticError):
    pass


# geometry
class EmptyInput(WestError, ValueError):
    pass


class DegenerateInput(WestError, ValueError):
    pass


class DuplicateCenters(WestError, ValueError):
    pass


class CenterOutsideBox(WestError, ValueError):
    pass


class AllZero(WestError, ValueError):
    pass


# mobility
class NonPositiveSpeed(WestError, ValueError):
    pass


class SingletonTrack(WestError, ValueError):
    pass


class EmptyWindow(WestError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


# graphcore
class TooShort(WestError, ValueError):
    pass


class EmptySplit(WestError, ValueError):
    pass


# autodiff / model
class ShapeMismatch(WestError, ValueError):
    pass


class NotScalar(WestError, ValueError):
    pass


class StaleTape(WestError, RuntimeError):
    pass


class CorruptCheckpoint(WestError, ValueError):
    pass


class VersionMismatch(WestError, ValueError):
    def __init__(self, found, expected):
        super().__init__(
            f"checkpoint format_version {found} is not supported "
            f"(this build reads version {expected})"
        )
        self.found = found
        self.expected = expected


# training
class Diverged(NumericFailure):
    def __init__(self, epoch, loss):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss
