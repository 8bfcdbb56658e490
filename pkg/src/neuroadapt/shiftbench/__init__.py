from .data import (
    DatasetManifest,
    Dataset,
    DatasetReader,
    ManifestRecord,
    TaskSpec,
    WindowBatch,
    batch_iter,
    normalize_p95,
    read_dataset,
    write_dataset,
)
from .suites import SuiteSpec, generate_suite

__all__ = [
    "Dataset",
    "DatasetManifest",
    "DatasetReader",
    "ManifestRecord",
    "SuiteSpec",
    "TaskSpec",
    "WindowBatch",
    "batch_iter",
    "generate_suite",
    "normalize_p95",
    "read_dataset",
    "write_dataset",
]
