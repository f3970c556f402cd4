"""Error taxonomy shared across the package.

ConfigError covers anything a user could fix by editing a config file and
maps to CLI exit code 2.  NumericError covers non-finite values discovered
mid-run and maps to exit code 3.  Mode and underrun errors on caches are
programming errors and are left to crash loudly.
"""


class ConfigError(ValueError):
    """Invalid configuration field; message names the offending field."""


class SequenceLengthError(ConfigError):
    """Sequence does not fit the model's context length."""


class NumericError(RuntimeError):
    """A loss or gradient stopped being finite."""


class CacheModeError(RuntimeError):
    """Cache write or read is incompatible with the bank's mode."""
