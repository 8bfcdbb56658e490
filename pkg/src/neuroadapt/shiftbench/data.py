"""Portable dataset layer: window batches, manifests, the NADB binary
format, batch iteration and amplitude normalization.

On-disk layout of a dataset directory:

``data.nadb``
    Header: magic ``NADB`` (4 bytes), then little-endian u32 fields
    [version, record_count, channels, samples, dtype_tag] with dtype_tag
    0 = float32.  Followed by ``record_count`` contiguous records, each
    ``channels * samples`` little-endian float32 values, channel-major
    (record ``i`` starts at ``HEADER_SIZE + i * channels * samples * 4``).

``manifest.json``
    Task description plus one entry per record: id, subject id, channels,
    samples, sample rate, optional label, split tag.  Records appear in
    file order.  Splits must be subject-disjoint.

The layout is deliberately trivial so externally converted recordings can
be dropped in; round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from ..errors import DataError, DatasetIOError
from ..rng import Rng

MAGIC = b"NADB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, count, channels, samples, dtype
DTYPE_F32 = 0

P95_EPS = 1e-8


def normalize_p95(window: np.ndarray, percentile: float = 95.0) -> np.ndarray:
    """Divide each channel by the 95th percentile of its absolute values.

    The percentile uses linear interpolation on the sorted magnitudes and
    is floored at a small epsilon so dead channels come out all-zero
    instead of NaN.
    """
    window = np.asarray(window)
    if window.ndim != 2 or window.shape[1] < 1:
        raise DataError(f"expected a (channels, samples) window, got {window.shape}")
    scale = np.percentile(np.abs(window), percentile, axis=1, method="linear")
    scale = np.maximum(scale, P95_EPS)
    return (window / scale[:, None]).astype(window.dtype)


@dataclass
class WindowBatch:
    """A batch of fixed-length multichannel windows flowing through the
    pipeline.  ``data`` is (B, C, T); labels are present only on labeled
    splits and are stripped before any adaptation code sees the batch."""

    data: np.ndarray
    labels: Optional[np.ndarray]
    record_ids: tuple
    subject_ids: tuple

    def __len__(self) -> int:
        return self.data.shape[0]

    def without_labels(self) -> "WindowBatch":
        return WindowBatch(self.data, None, self.record_ids, self.subject_ids)


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "binary" | "multiclass"
    num_classes: int

    def __post_init__(self):
        if self.kind not in ("binary", "multiclass"):
            raise DataError(f"unknown task kind {self.kind!r}")
        if self.kind == "binary" and self.num_classes != 2:
            raise DataError("binary tasks must have exactly 2 classes")
        if self.num_classes < 2:
            raise DataError("need at least 2 classes")

    @property
    def is_binary(self) -> bool:
        return self.kind == "binary"


@dataclass
class ManifestRecord:
    id: str
    subject_id: str
    channels: int
    samples: int
    sample_rate: float
    split: str  # train | val | test
    label: Optional[int] = None


@dataclass
class DatasetManifest:
    task: TaskSpec
    data_file: str
    records: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = set()
        splits_by_subject = {}
        for rec in self.records:
            if rec.id in seen:
                raise DataError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.split not in ("train", "val", "test"):
                raise DataError(f"record {rec.id}: unknown split {rec.split!r}")
            if rec.label is not None and not (0 <= rec.label < self.task.num_classes):
                raise DataError(
                    f"record {rec.id}: label {rec.label} outside "
                    f"[0, {self.task.num_classes})")
            splits_by_subject.setdefault(rec.subject_id, set()).add(rec.split)
        if self.records:
            c0, t0 = self.records[0].channels, self.records[0].samples
            for rec in self.records:
                if (rec.channels, rec.samples) != (c0, t0):
                    raise DataError(
                        f"record {rec.id}: shape ({rec.channels}, {rec.samples}) "
                        f"differs from dataset shape ({c0}, {t0})")
        leaky = {s: sp for s, sp in splits_by_subject.items() if len(sp) > 1}
        if leaky:
            raise DataError(f"subjects appear in multiple splits: {sorted(leaky)}")

    @property
    def channels(self) -> int:
        return self.records[0].channels

    @property
    def samples(self) -> int:
        return self.records[0].samples

    def split_indices(self, split: str) -> np.ndarray:
        idx = np.array([i for i, r in enumerate(self.records) if r.split == split],
                       dtype=np.int64)
        return idx

    def subject_ids(self) -> list:
        return sorted({r.subject_id for r in self.records})

    def to_json_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "task": {"kind": self.task.kind, "num_classes": self.task.num_classes},
            "data_file": self.data_file,
            "records": [
                {
                    "id": r.id,
                    "subject_id": r.subject_id,
                    "channels": r.channels,
                    "samples": r.samples,
                    "sample_rate": r.sample_rate,
                    "split": r.split,
                    **({"label": int(r.label)} if r.label is not None else {}),
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DatasetManifest":
        try:
            task = TaskSpec(doc["task"]["kind"], int(doc["task"]["num_classes"]))
            records = [
                ManifestRecord(
                    id=r["id"],
                    subject_id=r["subject_id"],
                    channels=int(r["channels"]),
                    samples=int(r["samples"]),
                    sample_rate=float(r["sample_rate"]),
                    split=r["split"],
                    label=int(r["label"]) if "label" in r else None,
                )
                for r in doc["records"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetIOError(f"malformed manifest: {exc}") from exc
        return cls(task=task, data_file=doc["data_file"], records=records)


@dataclass
class Dataset:
    """In-memory dataset: manifest plus the full (N, C, T) float32 array."""

    manifest: DatasetManifest
    data: np.ndarray

    def __post_init__(self):
        n = len(self.manifest.records)
        if self.data.ndim != 3 or self.data.shape[0] != n:
            raise DataError(
                f"data shape {self.data.shape} does not match manifest "
                f"({n} records)")

    def read_records(self, indices: Sequence[int]) -> np.ndarray:
        return self.data[np.asarray(indices, dtype=np.int64)]

    def batches(self, split: str, batch_size: int,
                order: str = "sequential", rng: Optional[Rng] = None):
        return batch_iter(self, split, batch_size, order=order, rng=rng)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest.json + data.nadb; returns the directory path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = dataset.manifest
    arr = np.ascontiguousarray(dataset.data, dtype="<f4")
    n, c, t = arr.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, c, t, DTYPE_F32)
    with open(out_dir / man.data_file, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(man.to_json_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out_dir


class DatasetReader:
    """Lazy, validated reader over a dataset directory.

    Records are read on demand so iteration over one split never touches
    the others' bytes.  Immutable after open; safe for concurrent reads.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        manifest_path = self.directory / "manifest.json"
        if not manifest_path.exists():
            raise DatasetIOError(f"no manifest.json under {self.directory}")
        with open(manifest_path) as fh:
            self.manifest = DatasetManifest.from_json_dict(json.load(fh))
        self.data_path = self.directory / self.manifest.data_file
        self._validate_data_file()

    def _validate_data_file(self):
        if not self.data_path.exists():
            raise DatasetIOError(f"missing data file {self.data_path}")
        size = self.data_path.stat().st_size
        if size < _HEADER.size:
            raise DatasetIOError(
                f"{self.data_path}: file too small for a header "
                f"({size} < {_HEADER.size} bytes)")
        with open(self.data_path, "rb") as fh:
            magic, version, count, channels, samples, dtype = _HEADER.unpack(
                fh.read(_HEADER.size))
        if magic != MAGIC:
            raise DatasetIOError(f"{self.data_path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise DatasetIOError(
                f"{self.data_path}: unsupported version {version}")
        if dtype != DTYPE_F32:
            raise DatasetIOError(f"{self.data_path}: unknown dtype tag {dtype}")
        n_manifest = len(self.manifest.records)
        if count != n_manifest:
            raise DatasetIOError(
                f"{self.data_path}: header says {count} records, manifest "
                f"lists {n_manifest}")
        if self.manifest.records and (
                channels != self.manifest.channels
                or samples != self.manifest.samples):
            raise DatasetIOError(
                f"{self.data_path}: header shape ({channels}, {samples}) "
                f"does not match manifest "
                f"({self.manifest.channels}, {self.manifest.samples})")
        expected = _HEADER.size + count * channels * samples * 4
        if size != expected:
            raise DatasetIOError(
                f"{self.data_path}: expected {expected} bytes, found {size}")
        self._shape = (count, channels, samples)

    def read_records(self, indices: Sequence[int]) -> np.ndarray:
        _, c, t = self._shape
        rec_bytes = c * t * 4
        out = np.empty((len(indices), c, t), dtype=np.float32)
        with open(self.data_path, "rb") as fh:
            for j, i in enumerate(indices):
                fh.seek(_HEADER.size + int(i) * rec_bytes)
                buf = fh.read(rec_bytes)
                if len(buf) != rec_bytes:
                    raise DatasetIOError(
                        f"{self.data_path}: truncated record {i}")
                out[j] = np.frombuffer(buf, dtype="<f4").reshape(c, t)
        return out

    def load(self) -> Dataset:
        n = self._shape[0]
        return Dataset(self.manifest, self.read_records(range(n)))

    def batches(self, split: str, batch_size: int,
                order: str = "sequential", rng: Optional[Rng] = None):
        return batch_iter(self, split, batch_size, order=order, rng=rng)


def read_dataset(directory) -> DatasetReader:
    return DatasetReader(directory)


def batch_iter(source, split: str, batch_size: int,
               order: str = "sequential",
               rng: Optional[Rng] = None) -> Iterator[WindowBatch]:
    """Stream WindowBatches for one split.

    ``sequential`` preserves manifest order (the deterministic stream
    semantics online adaptation relies on); ``seeded-shuffle`` permutes
    records with the supplied rng.  The final partial batch is emitted.
    """
    manifest = source.manifest
    indices = manifest.split_indices(split)
    if indices.size == 0:
        raise DataError(f"split {split!r} has no records")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if order == "seeded-shuffle":
        if rng is None:
            raise DataError("seeded-shuffle order requires an rng")
        indices = indices[rng.permutation(indices.size)]
    elif order != "sequential":
        raise DataError(f"unknown iteration order {order!r}")
    records = manifest.records
    for start in range(0, indices.size, batch_size):
        chunk = indices[start:start + batch_size]
        data = source.read_records(chunk)
        labels = [records[i].label for i in chunk]
        has_labels = all(lab is not None for lab in labels)
        yield WindowBatch(
            data=data,
            labels=np.array(labels, dtype=np.int64) if has_labels else None,
            record_ids=tuple(records[i].id for i in chunk),
            subject_ids=tuple(records[i].subject_id for i in chunk),
        )
