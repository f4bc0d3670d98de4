"""Exception types shared across the package."""


class HVTSurvError(Exception):
    """Base class for all package-specific failures."""


class FormatError(HVTSurvError):
    """File does not match the expected on-disk format (magic, version, header)."""


class CorruptionError(HVTSurvError):
    """File matches the format header but its payload is truncated or inconsistent."""


class EmptyBagError(HVTSurvError):
    """A patch bag contains zero patches."""


class ValidationError(HVTSurvError):
    """Input data violates a documented invariant."""


class ResolutionError(ValidationError):
    """A referenced file could not be found."""


class InsufficientDataError(HVTSurvError):
    """Not enough data to compute the requested statistic or binning."""


class ConfigurationError(HVTSurvError):
    """A configuration value is out of range or inconsistent."""


class ShapeError(HVTSurvError):
    """Matrix operands have incompatible shapes."""


class UndefinedStatisticError(HVTSurvError):
    """The requested statistic is undefined on this input (e.g. no comparable pairs)."""


class NumericError(HVTSurvError):
    """A numeric computation produced non-finite values."""
