from envdpo.constants import EXIT_CHECK, EXIT_CONFIG, EXIT_IO


class EnvdpoError(Exception):
    kind = "internal"
    exit_code = EXIT_CHECK


class ConfigError(EnvdpoError, ValueError):
    kind = "config"
    exit_code = EXIT_CONFIG


class CheckFailure(EnvdpoError):
    kind = "check"
    exit_code = EXIT_CHECK


class InputError(EnvdpoError):
    kind = "io"
    exit_code = EXIT_IO


class DimensionError(EnvdpoError, ValueError):
    kind = "dimension"
    exit_code = EXIT_CONFIG


class ActionIndexError(EnvdpoError, IndexError):
    kind = "action"
    exit_code = EXIT_CONFIG


class NormalizationError(EnvdpoError, ValueError):
    kind = "normalization"
    exit_code = EXIT_CONFIG


class ZeroMassError(EnvdpoError, ValueError):
    kind = "zero-mass"
    exit_code = EXIT_CHECK


class NoClusterError(EnvdpoError):
    """Every point was labelled noise, so there are no centers to compute."""

    kind = "no-cluster"
    exit_code = EXIT_CHECK


class EmptyBatchError(EnvdpoError, ValueError):
    kind = "empty-batch"
    exit_code = EXIT_IO
