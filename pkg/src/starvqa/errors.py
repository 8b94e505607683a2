"""Exception types shared across the package."""


class StarVQAError(Exception):
    """Base class for all package errors."""


class DimensionError(StarVQAError, ValueError):
    pass


class ContractError(StarVQAError, ValueError):
    pass


class ConfigError(StarVQAError, ValueError):
    pass


class InputError(StarVQAError, ValueError):
    pass


class StateError(StarVQAError, RuntimeError):
    pass


class DegenerateInputError(StarVQAError, ValueError):
    """Raised when a correlation is undefined (constant input)."""


class FormatError(StarVQAError, ValueError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ManifestError(FormatError):
    pass
