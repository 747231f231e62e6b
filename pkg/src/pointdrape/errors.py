"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes, so prefer raising one
of them (with a message naming the offending file/field) over bare
ValueError in anything user-facing.
"""


class ValidationError(ValueError):
    """Invalid argument or data (bad shapes, broken invariants, bad ranges)."""


class ConfigError(ValueError):
    """Inconsistent run configuration (e.g. mode requires a missing stage)."""


class FormatError(ValueError):
    """Malformed or version-mismatched file content."""
