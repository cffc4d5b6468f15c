"""Exception hierarchy shared by all modules.

The CLI maps each family to a distinct exit code.
"""


class BinresError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(BinresError, ValueError):
    pass


class ConfigError(BinresError):
    """Bad user configuration: missing keys, unknown variants, missing binaries."""


class IntegrityError(BinresError):
    """Corrupt or mismatched data: truncated bitstreams, fingerprint mismatch."""


class CodecError(BinresError, RuntimeError):
    """An external codec process failed."""
