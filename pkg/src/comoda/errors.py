"""Exception types shared across the package."""


class ComodaError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(ComodaError):
    """Invalid configuration: bad values, unknown keys, malformed files."""


class DataFormatError(ComodaError):
    """Malformed corpus or feature file content."""


class PlanError(ComodaError):
    """A pairing plan cannot be built or is inconsistent with its inputs."""


class NumericError(ComodaError):
    """Non-finite values encountered where finite values are required."""


class LabelAccessError(ComodaError):
    """Target ground-truth labels were requested outside an evaluation scope."""


class UnknownClipError(ComodaError):
    """A clip id was requested that the container does not hold."""
