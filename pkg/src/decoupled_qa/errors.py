"""Exception types shared across the package.

The CLI maps each family to its own exit code, so new errors should
subclass one of the three roots below.
"""


class ConfigError(ValueError):
    """Invalid configuration, split, or hyperparameter."""


class DataError(ValueError):
    """Bad input data, missing files, corrupt artifacts."""


class NumericError(FloatingPointError):
    """Non-finite loss or gradient during training."""


class ShapeError(ConfigError):
    pass


class CacheFormatError(DataError):
    pass


class EntryNotFoundError(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class HashMismatchError(DataError):
    pass
