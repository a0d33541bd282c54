"""Exception hierarchy shared by every subsystem."""


class MatchingGANError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit."""


class ConfigError(MatchingGANError, ValueError):
    pass


class DataError(MatchingGANError, ValueError):
    pass


class ShapeError(MatchingGANError, ValueError):
    pass


class NumericError(MatchingGANError, ArithmeticError):
    pass


class UsageError(MatchingGANError, ValueError):
    pass


class TrainingError(MatchingGANError, RuntimeError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class CheckpointError(MatchingGANError, RuntimeError):
    pass


class ProtocolError(MatchingGANError, RuntimeError):
    pass
