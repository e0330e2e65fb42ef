"""Exception hierarchy shared by every module.

The CLI maps each family onto a distinct exit code, so new errors should
subclass one of the families below rather than ``ProcanetError`` directly.
"""


class ProcanetError(Exception):
    """Base class for all package errors."""


class ShapeError(ProcanetError, ValueError):
    """Tensor shapes or channel counts disagree with an operation's contract."""


class ConfigError(ProcanetError, ValueError):
    """An invalid model, loss, scheduler or training configuration."""


class NumericError(ProcanetError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(ProcanetError, IOError):
    """A binary file on disk does not follow its declared layout."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class PayloadLengthError(FormatError):
    pass


class ManifestMismatchError(FormatError):
    """A stored manifest disagrees with the shapes the caller expects."""


class DimensionOverflowError(FormatError):
    pass
