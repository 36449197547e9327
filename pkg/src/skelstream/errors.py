"""Exception types shared across the package."""


class SkelstreamError(Exception):
    """Base class for all package errors."""


class ConfigError(SkelstreamError):
    """Invalid configuration value or combination."""


class DimensionError(SkelstreamError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(SkelstreamError):
    """Malformed or out-of-contract input data."""


class ParseError(DataError):
    """Document failed schema validation; message names the offending path."""


class StateError(SkelstreamError):
    """Operation not valid in the object's current state."""


class OracleError(SkelstreamError):
    """A verification oracle could not be evaluated (e.g. non-finite value)."""


class TrainingDiverged(SkelstreamError):
    """Loss became non-finite during optimization."""
