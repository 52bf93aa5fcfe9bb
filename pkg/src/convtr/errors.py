"""Exception hierarchy shared across the library."""


class ConvTrError(Exception):
    """Base class for all library errors."""


class ShapeError(ConvTrError):
    """Tensor shapes are inconsistent with the requested operation."""


class ParameterError(ConvTrError):
    """A layer or operation parameter is out of its valid range."""


class PrecisionError(ConvTrError):
    """An operation requires a different floating-point precision."""


class StatisticsError(ConvTrError):
    """Statistics are undefined (too few samples, zero variance)."""


class DataError(ConvTrError):
    """Input data violates its contract (e.g. label out of range)."""


class FormatError(ConvTrError):
    """A file does not conform to its container format."""


class IntegrityError(FormatError):
    """A file is truncated or fails its checksum."""


class UnsupportedVersionError(FormatError):
    """A file declares a format version this build cannot read."""


class NumericFault(ConvTrError):
    """A non-finite value appeared where finite math was required."""


class ConfigError(ConvTrError):
    """A configuration is invalid or internally inconsistent."""


class SceneSkipped(ConvTrError):
    """A scene cannot yield any crop satisfying the sampler contract."""


class UndefinedMetricError(ConvTrError):
    """A metric has no defined value (e.g. every class absent)."""
