"""Exception hierarchy shared across the toolkit.

Every error carries a short machine-parsable ``code`` so the CLI can emit
one-line diagnostics of the form ``<code>: <message>``.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


class ConfigError(ToolkitError):
    """Invalid or inconsistent configuration values."""

    code = "config-error"


class ShapeError(ToolkitError):
    """Array shapes do not satisfy an operation's contract."""

    code = "shape-mismatch"


class BoundsError(ToolkitError):
    """A time or coordinate falls outside its valid range."""

    code = "bounds-error"


class DegenerateWindowError(ToolkitError):
    """A time window has zero width where a positive one is required."""

    code = "degenerate-window"


class FormatError(ToolkitError):
    """A file does not conform to its on-disk format."""

    code = "format-error"


class NonFiniteLossError(ToolkitError):
    """Training produced a NaN or infinite loss."""

    code = "non-finite-loss"
