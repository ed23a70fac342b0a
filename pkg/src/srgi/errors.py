class DataError(Exception):
    """Malformed or unusable input data (CLI exit code 2)."""


class NumericError(Exception):
    """Non-finite values encountered during optimization (CLI exit code 3)."""
