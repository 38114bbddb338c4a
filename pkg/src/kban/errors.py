"""Error types shared across modules, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid configuration (bad key, bad value, inconsistent settings). Exit code 2."""


class DataError(Exception):
    """Invalid or mismatched input data / checkpoint / scene files. Exit code 3."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss. Exit code 4."""
