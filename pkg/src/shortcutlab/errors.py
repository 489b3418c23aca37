"""Exception types shared across the package."""


class ShortcutLabError(Exception):
    """Base class for all package errors."""


class ShapeError(ShortcutLabError, ValueError):
    pass


class NumericError(ShortcutLabError, ArithmeticError):
    pass


class ConfigError(ShortcutLabError, ValueError):
    pass


class PatchError(ShortcutLabError, ValueError):
    """Invalid component, position or routing in a patch request."""


class SchemaError(ShortcutLabError, ValueError):
    """A file on disk does not match the expected format or version."""
