"""Exception types shared across the package.

The CLI maps :class:`InputError` and :class:`ConfigError` to exit code 1 and
everything else derived from :class:`SamiError` to exit code 2.
"""


class SamiError(Exception):
    pass


class ConfigError(SamiError, ValueError):
    """Invalid configuration or hyperparameter."""


class InputError(SamiError, ValueError):
    """Bad user-supplied data (files, prompts, coordinates)."""


class ParseError(InputError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(SamiError, RuntimeError):
    """A caller broke an operation's precondition."""


class DimensionError(ContractError, ValueError):
    pass


class NumericError(SamiError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class CorruptionError(SamiError):
    """Checksum or format mismatch in a persisted file."""
