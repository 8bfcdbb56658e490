"""Exception taxonomy shared across the package."""


class NeuroAdaptError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NeuroAdaptError):
    """An array did not have the shape an operation requires."""

    def __init__(self, what: str, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected shape {expected}, got {actual}")


class ConfigError(NeuroAdaptError):
    """Invalid configuration value or schema violation."""


class DataError(NeuroAdaptError):
    """Invalid dataset contents (labels out of range, empty splits, ...)."""


class SplitError(DataError):
    """A subject-level split could not be constructed."""


class DatasetIOError(NeuroAdaptError):
    """Corrupt, truncated or inconsistent dataset files."""


class AdaptationError(NeuroAdaptError):
    """Adaptation produced a non-finite state; carries the failing batch index."""

    def __init__(self, message: str, batch_index=None):
        self.batch_index = batch_index
        if batch_index is not None:
            message = f"{message} (batch {batch_index})"
        super().__init__(message)


class ReportError(NeuroAdaptError):
    """Run records could not be turned into a report (e.g. orphan runs)."""


class UndefinedMetricError(NeuroAdaptError):
    """A metric is undefined for the given labels (e.g. single-class ROC-AUC)."""
