"""Exception hierarchy.

Everything raised on purpose derives from :class:`FourDVCError`.  The CLI maps
the three branches below onto exit codes (usage 1, data 2, numerical 3).
"""


class FourDVCError(Exception):
    pass


class UsageError(FourDVCError):
    """Bad configuration or argument combination."""


class DataError(FourDVCError):
    """Input data is malformed or inconsistent."""


class NumericalError(FourDVCError):
    """A NaN/Inf appeared where finite values are required."""


# -- asset_io
class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FaceArityError(ParseError):
    pass


class ObjIndexError(ParseError, IndexError):
    pass


class FormatError(DataError):
    pass


class ManifestError(DataError):
    pass


class TopologyError(DataError):
    pass


# -- normalize
class DegenerateFeatureError(DataError):
    def __init__(self, feature, message=None):
        self.feature = feature
        super().__init__(message or f"feature {feature} is constant over the fitting set")


# -- tensor_ops / vae
class ConfigError(UsageError):
    pass


class ShapeError(UsageError, ValueError):
    pass


class BatchSizeError(ShapeError):
    pass


class ConditioningError(UsageError):
    pass


# -- train
class SplitError(DataError):
    pass


# -- codec
class ContainerError(DataError):
    pass


class FingerprintError(DataError):
    pass


class PlaybackError(DataError):
    """Acquisition failed mid-playback; carries the partial event log."""

    def __init__(self, index, events, cause):
        self.index = index
        self.events = events
        self.cause = cause
        super().__init__(f"frame {index}: {cause}")
