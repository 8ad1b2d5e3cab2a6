"""Exception hierarchy shared across the package.

The CLI maps the three top-level families to distinct exit codes:
configuration problems, data problems, and everything else.
"""


class TabEmbedError(Exception):
    """Base class for all package errors."""


class ConfigError(TabEmbedError, ValueError):
    """Invalid configuration: unknown method, bad widths, missing option."""


class ParameterError(ConfigError):
    """A numeric hyperparameter outside its valid range."""


class DimensionError(TabEmbedError, ValueError):
    """Tensor shapes that do not agree."""


class ContractError(TabEmbedError, RuntimeError):
    """An operation was called outside its preconditions."""


class DataError(TabEmbedError, ValueError):
    """Malformed, empty or otherwise unusable data."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    """Data does not match the declared feature schema."""


class OutOfVocabularyError(DataError, IndexError):
    """Categorical index outside the known vocabulary (plus reserved row)."""


class StaleCacheError(ContractError):
    """A precomputed table no longer matches the parameters it came from."""


class MetricError(DataError):
    """A metric is undefined for the given labels (e.g. a single class)."""
