"""Bi-modal (camera + LiDAR) place recognition on a shared bird-eye-view grid."""

__version__ = "0.1.0"


class CoralError(Exception):
    """Base class for errors the CLI maps onto exit codes."""

    exit_code = 2


class ConfigError(CoralError):
    exit_code = 1


class DataError(CoralError):
    exit_code = 2


class NumericalError(CoralError):
    exit_code = 3
