"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: configuration errors exit 2, missing
pipeline dependencies exit 3, everything else exits 4.
"""


class UsageError(ValueError):
    """An operation was called with arguments it cannot accept."""


class ConfigurationError(ValueError):
    """A config value is structurally valid but inconsistent (sizes, keys)."""


class DataError(ValueError):
    """Input data violates a documented invariant (e.g. non-simplex target)."""


class DatasetIOError(OSError):
    """Dataset files are missing or corrupt; message names the path."""


class PipelineDependencyError(RuntimeError):
    """A pipeline stage was requested before its upstream artifacts exist."""
