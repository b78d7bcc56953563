"""Exception types shared across the engine."""


class DistillFieldError(Exception):
    """Base class for engine errors."""


class ConfigError(DistillFieldError):
    """Invalid or missing configuration; the message names the offending key."""


class CheckpointError(DistillFieldError):
    """Corrupt or incompatible checkpoint file."""


class OracleError(DistillFieldError):
    """A guidance oracle rejected a request (capability or shape mismatch)."""


class OracleConnectivityError(DistillFieldError):
    """A remote guidance oracle could not be reached or spoke garbage."""


class NumericalFailure(DistillFieldError):
    """Non-finite values detected during optimization."""
