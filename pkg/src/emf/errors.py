"""Exception hierarchy shared by all modules."""


class EMFError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(EMFError, ValueError):
    """A file does not parse under its declared format."""


class ValidationError(EMFError, ValueError):
    """A parsed record violates a domain invariant."""


class ShapeError(EMFError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class StateError(EMFError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class ConfigError(EMFError, ValueError):
    """A configuration is invalid or internally inconsistent."""


class ConsistencyError(EMFError, RuntimeError):
    """An upstream invariant was broken (indicates a bug in the caller)."""
