"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TarnetError(Exception):
    exit_code = 1


class UsageError(TarnetError, ValueError):
    """Invalid call or argument (wrong op usage, bad CLI flag)."""

    exit_code = 2


class ConfigurationError(TarnetError, ValueError):
    """Shapes or widths that do not chain together."""

    exit_code = 2


class DataError(TarnetError, ValueError):
    """Bad input data: short or NaN waveforms, unreadable files, bad labels."""

    exit_code = 3


class NumericError(TarnetError, ArithmeticError):
    """NaN during training or a failed gradient check."""

    exit_code = 4
