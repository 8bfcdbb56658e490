"""Seeded synthetic shift suites.

A suite is a pair of datasets (labeled source with train/val splits,
target with a test split) sharing class semantics.  Generators are pure
functions of the spec, so the same spec+seed always produces byte
identical files.

Two data modes:

* ``features`` — class-conditional Gaussians over feature vectors,
  stored as (1, D) records; intended for the identity encoder where the
  Bayes error is directly controlled by ``class_sep``.
* ``windows`` — band-limited class template waveforms plus noise over
  (C, T) windows; intended for the projection/two-layer encoders.

Shift knobs (all neutral by default, so a spec with none set is the
zero-shift suite):

* ``subject_offset_std`` — per-subject mean offsets, disjoint subject
  pools between source and target.
* ``target_priors`` — resampled class priors on the target.
* ``channel_gain`` / ``channel_offset`` — per-channel affine distortion
  applied to the target only.
* ``drop_channels`` — target channels zeroed, the survivors rescaled
  (wearable-electrode analog).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from ..errors import ConfigError
from ..rng import Rng
from .data import Dataset, DatasetManifest, ManifestRecord, TaskSpec

SUITE_KINDS = ("subject_shift", "label_shift", "covariate_shift", "modality_shift")


@dataclass(frozen=True)
class SuiteSpec:
    name: str
    kind: str
    seed: int
    num_classes: int = 2
    mode: str = "features"
    feature_dim: int = 16
    channels: int = 4
    samples: int = 64
    sample_rate: float = 64.0
    class_sep: float = 2.0
    noise_std: float = 1.0
    source_priors: Optional[Tuple[float, ...]] = None
    target_priors: Optional[Tuple[float, ...]] = None
    subject_offset_std: float = 0.0
    # target cohort severity override; None = same as source
    target_subject_offset_std: Optional[float] = None
    # scalar, or one value per channel (features mode: per coordinate)
    channel_gain: object = 1.0
    channel_offset: object = 0.0
    drop_channels: Tuple[int, ...] = ()
    n_train: int = 1200
    n_val: int = 400
    n_target: int = 2000
    n_subjects_source: int = 10
    n_subjects_target: int = 4

    def validate(self):
        if self.kind not in SUITE_KINDS:
            raise ConfigError(f"unknown suite kind {self.kind!r}")
        if self.mode not in ("features", "windows"):
            raise ConfigError(f"unknown suite mode {self.mode!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        for label, priors in (("source", self.source_priors),
                              ("target", self.target_priors)):
            if priors is None:
                continue
            if len(priors) != self.num_classes:
                raise ConfigError(
                    f"{label}_priors has {len(priors)} entries for "
                    f"{self.num_classes} classes")
            if abs(sum(priors) - 1.0) > 1e-9 or min(priors) < 0:
                raise ConfigError(f"{label}_priors must be a distribution, "
                                  f"got {priors}")
        if min(self.n_train, self.n_val, self.n_target) < 1:
            raise ConfigError("sample counts must be positive")
        if self.n_subjects_source < 2 or self.n_subjects_target < 1:
            raise ConfigError("need >= 2 source subjects and >= 1 target subject")
        dim = self.affine_dim
        if any(not 0 <= c < dim for c in self.drop_channels):
            raise ConfigError(f"drop_channels out of range for {dim} channels")
        if len(self.drop_channels) >= dim:
            raise ConfigError("cannot drop every channel")
        for label, value in (("channel_gain", self.channel_gain),
                             ("channel_offset", self.channel_offset)):
            arr = np.asarray(value, dtype=np.float64)
            if arr.ndim not in (0, 1) or (arr.ndim == 1 and arr.size != dim):
                raise ConfigError(
                    f"{label} must be a scalar or one value per channel "
                    f"({dim}), got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise ConfigError(f"{label} must be finite")
        severity = [self.class_sep, self.noise_std, self.subject_offset_std]
        if self.target_subject_offset_std is not None:
            severity.append(self.target_subject_offset_std)
        if not np.isfinite(severity).all():
            raise ConfigError("suite parameters must be finite")

    @property
    def record_shape(self) -> Tuple[int, int]:
        if self.mode == "features":
            return (1, self.feature_dim)
        return (self.channels, self.samples)

    @property
    def affine_dim(self) -> int:
        """Axis the per-channel shift knobs index: channels for windows,
        coordinates for feature vectors."""
        return self.channels if self.mode == "windows" else self.feature_dim

    @property
    def task(self) -> TaskSpec:
        kind = "binary" if self.num_classes == 2 else "multiclass"
        return TaskSpec(kind, self.num_classes)

    def resolved_priors(self) -> Tuple[np.ndarray, np.ndarray]:
        uniform = np.full(self.num_classes, 1.0 / self.num_classes)
        src = np.asarray(self.source_priors, dtype=np.float64) \
            if self.source_priors is not None else uniform
        tgt = np.asarray(self.target_priors, dtype=np.float64) \
            if self.target_priors is not None else src
        return src, tgt

    def to_dict(self) -> dict:
        return asdict(self)


def _class_means(spec: SuiteSpec, rng: Rng) -> np.ndarray:
    """Equidistant class means: orthonormal directions scaled so every
    pair of means sits class_sep * noise_std apart."""
    c, t = spec.record_shape
    dim = c * t
    if dim < spec.num_classes:
        raise ConfigError(f"record dim {dim} too small for "
                          f"{spec.num_classes} orthogonal class means")
    g = rng.normal((dim, spec.num_classes), dtype=np.float64)
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # fix the sign convention for determinism
    radius = spec.class_sep * spec.noise_std / np.sqrt(2.0)
    return (q * radius).T.reshape(spec.num_classes, c, t)


def _class_templates(spec: SuiteSpec, rng: Rng) -> np.ndarray:
    """Band-limited per-class template waveforms for windows mode."""
    c, t = spec.channels, spec.samples
    grid = np.arange(t, dtype=np.float64) / t
    templates = np.zeros((spec.num_classes, c, t), dtype=np.float64)
    for k in range(spec.num_classes):
        r = rng.derive("class-template", k)
        freqs = r.uniform((c, 4), low=1.0, high=8.0, dtype=np.float64)
        phases = r.uniform((c, 4), low=0.0, high=2 * np.pi, dtype=np.float64)
        amps = r.normal((c, 4), dtype=np.float64)
        wave = (amps[..., None]
                * np.sin(2 * np.pi * freqs[..., None] * grid + phases[..., None]))
        templates[k] = wave.sum(axis=1)
        # rescale so template energy matches the feature-mode separation
        norm = np.linalg.norm(templates[k])
        if norm > 0:
            templates[k] *= (spec.class_sep * spec.noise_std / np.sqrt(2.0)) / norm
    return templates


def _subject_offsets(spec: SuiteSpec, rng: Rng, prefix: str, count: int,
                     std: float) -> np.ndarray:
    c, t = spec.record_shape
    offsets = np.zeros((count, c, t), dtype=np.float64)
    if std > 0:
        for i in range(count):
            r = rng.derive(f"subject-offset-{prefix}", i)
            offsets[i] = r.normal((c, t), scale=std, dtype=np.float64)
    return offsets


def _draw_domain(spec, rng, tag, means, offsets, priors, subjects_of, n):
    labels = rng.derive(f"{tag}-labels").choice_with_priors(priors, n)
    subject_idx = rng.derive(f"{tag}-subjects").integers(0, len(offsets), n)
    noise = rng.derive(f"{tag}-noise").normal(
        (n,) + spec.record_shape, scale=spec.noise_std, dtype=np.float64)
    data = means[labels] + offsets[subject_idx] + noise
    subjects = [subjects_of[i] for i in subject_idx]
    return data, labels, subjects


def _apply_target_shift(spec: SuiteSpec, data: np.ndarray) -> np.ndarray:
    gain = np.asarray(spec.channel_gain, dtype=np.float64)
    offset = np.asarray(spec.channel_offset, dtype=np.float64)
    if spec.mode == "windows":  # broadcast over the channel axis
        gain = gain.reshape(1, -1, 1) if gain.ndim else gain
        offset = offset.reshape(1, -1, 1) if offset.ndim else offset
    data = data * gain + offset
    if spec.drop_channels:
        c = spec.affine_dim
        keep = c - len(spec.drop_channels)
        data = data * np.sqrt(c / keep)
        if spec.mode == "windows":
            data[:, list(spec.drop_channels), :] = 0.0
        else:
            data[:, :, list(spec.drop_channels)] = 0.0
    return data


def generate_suite(spec: SuiteSpec):
    """Build (source, target) datasets for a suite spec.

    Deterministic in spec.seed.  Labels are stored on every split; the
    adaptation boundary is responsible for stripping them from the test
    stream.
    """
    spec.validate()
    rng = Rng(spec.seed)
    src_priors, tgt_priors = spec.resolved_priors()

    structure_rng = rng.derive("class-structure")
    if spec.mode == "features":
        means = _class_means(spec, structure_rng)
    else:
        means = _class_templates(spec, structure_rng)

    src_subjects = [f"{spec.name}-src{i:03d}" for i in range(spec.n_subjects_source)]
    tgt_subjects = [f"{spec.name}-tgt{i:03d}" for i in range(spec.n_subjects_target)]
    tgt_std = spec.subject_offset_std \
        if spec.target_subject_offset_std is None \
        else spec.target_subject_offset_std
    src_offsets = _subject_offsets(spec, rng, "source",
                                   spec.n_subjects_source,
                                   spec.subject_offset_std)
    tgt_offsets = _subject_offsets(spec, rng, "target",
                                   spec.n_subjects_target, tgt_std)

    # subject-disjoint train/val: split the subject pool, then draw each
    # split's records from its own subjects
    order = rng.derive("source-subject-split").permutation(spec.n_subjects_source)
    n_train_subj = max(1, int(np.floor(0.8 * spec.n_subjects_source)))
    train_pool = sorted(order[:n_train_subj].tolist())
    val_pool = sorted(order[n_train_subj:].tolist())

    def draw_split(tag, pool, n):
        return _draw_domain(
            spec, rng, tag, means,
            src_offsets[pool], src_priors,
            [src_subjects[i] for i in pool], n)

    train_data, train_labels, train_subj = draw_split("source-train", train_pool,
                                                      spec.n_train)
    val_data, val_labels, val_subj = draw_split("source-val", val_pool, spec.n_val)

    tgt_data, tgt_labels, tgt_subj = _draw_domain(
        spec, rng, "target", means, tgt_offsets, tgt_priors,
        tgt_subjects, spec.n_target)
    tgt_data = _apply_target_shift(spec, tgt_data)

    c, t = spec.record_shape

    def build(tag, chunks):
        records, arrays = [], []
        i = 0
        for split, data, labels, subjects in chunks:
            for row, label, subject in zip(data, labels, subjects):
                records.append(ManifestRecord(
                    id=f"{spec.name}-{tag}-{i:05d}",
                    subject_id=subject,
                    channels=c, samples=t,
                    sample_rate=spec.sample_rate,
                    split=split, label=int(label)))
                arrays.append(row)
                i += 1
        manifest = DatasetManifest(task=spec.task, data_file="data.nadb",
                                   records=records)
        return Dataset(manifest, np.asarray(arrays, dtype=np.float32))

    source = build("src", [("train", train_data, train_labels, train_subj),
                           ("val", val_data, val_labels, val_subj)])
    target = build("tgt", [("test", tgt_data, tgt_labels, tgt_subj)])
    return source, target
