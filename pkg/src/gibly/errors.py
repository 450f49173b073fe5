"""Exception types raised across the package."""


class GiblyError(Exception):
    """Base class for all package errors."""


class NonPositiveCellSize(GiblyError, ValueError):
    pass


class KOutOfRange(GiblyError, ValueError):
    pass


class WrongKind(GiblyError, ValueError):
    pass


class DimensionMismatch(GiblyError, ValueError):
    pass


class InvalidCount(GiblyError, ValueError):
    pass


class NonPositiveRadius(GiblyError, ValueError):
    pass


class IndexCloudMismatch(GiblyError, ValueError):
    pass


class StaleCache(GiblyError, RuntimeError):
    pass


class ShapeMismatch(GiblyError, ValueError):
    pass


class InvalidSpec(GiblyError, ValueError):
    pass


class DegenerateLabels(GiblyError, ValueError):
    pass


class EmptyCloud(GiblyError, ValueError):
    pass


class UnsupportedPly(GiblyError, ValueError):
    def __init__(self, feature):
        super().__init__(f"unsupported PLY feature: {feature}")
        self.feature = feature


class ParseError(GiblyError, ValueError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class IoError(GiblyError, OSError):
    pass
