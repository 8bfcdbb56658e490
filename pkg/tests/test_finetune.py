import numpy as np
import pytest

from neuroadapt.errors import DataError, SplitError
from neuroadapt.finetune import (FinetuneConfig, TrainingLog, select_model,
                                 split_patients, train_head)
from neuroadapt.metrics import balanced_accuracy, confusion_matrix
from neuroadapt.model import EncoderSpec, build_encoder, predict_proba
from neuroadapt.rng import Rng
from neuroadapt.shiftbench import (Dataset, DatasetManifest, ManifestRecord,
                                   SuiteSpec, TaskSpec, generate_suite)


def subjects_manifest(n_subjects, records_per_subject=2):
    records = []
    for s in range(n_subjects):
        for r in range(records_per_subject):
            records.append(ManifestRecord(
                id=f"s{s}-r{r}", subject_id=f"subject-{s}", channels=1,
                samples=4, sample_rate=1.0, split="train", label=r % 2))
    return DatasetManifest(TaskSpec("binary", 2), "data.nadb", records)


# -- patient splits ---------------------------------------------------------

def test_split_patients_80_20_counts():
    train, val = split_patients(subjects_manifest(10), seed=3)
    assert len(train) == 8 and len(val) == 2


def test_split_patients_deterministic():
    m = subjects_manifest(9)
    assert split_patients(m, seed=5) == split_patients(m, seed=5)
    assert split_patients(m, seed=5) != split_patients(m, seed=6)


def test_split_patients_disjoint_on_random_manifests():
    rng = Rng(11).derive("splits")
    for i in range(30):
        n = int(rng.integers(2, 40))
        train, val = split_patients(subjects_manifest(n), seed=i)
        # brute-force partition check
        assert set(train) & set(val) == set()
        assert sorted(train + val) == [f"subject-{s}" for s in
                                       sorted(range(n),
                                              key=lambda x: f"subject-{x}")]


def test_split_patients_too_few_subjects():
    with pytest.raises(SplitError):
        split_patients(subjects_manifest(1), seed=0)


# -- model selection --------------------------------------------------------

def test_select_model_examples():
    log = TrainingLog("roc_auc", val_metric=[0.6, 0.8, 0.7])
    assert select_model(log) == 1
    assert select_model(TrainingLog("roc_auc", val_metric=[0.5, 0.5, 0.5])) == 0


def test_select_model_matches_linear_scan():
    rng = Rng(12).derive("select")
    for i in range(50):
        history = rng.derive("h", i).uniform((int(rng.integers(1, 12)),),
                                             dtype=np.float64).tolist()
        best, best_idx = -np.inf, -1
        for idx, v in enumerate(history):
            if v > best:
                best, best_idx = v, idx
        assert select_model(TrainingLog("x", val_metric=history)) == best_idx


def test_select_model_empty_history():
    with pytest.raises(DataError):
        select_model(TrainingLog("roc_auc"))


# -- training ---------------------------------------------------------------

def easy_suite(seed=0, **kw):
    defaults = dict(name="easy", kind="covariate_shift", seed=seed,
                    class_sep=6.0, n_train=600, n_val=200, n_target=50,
                    feature_dim=16)
    defaults.update(kw)
    return SuiteSpec(**defaults)


def train_on(source, seed=0, epochs=4, batch_size=128):
    encoder = build_encoder(EncoderSpec(
        "identity", channels=1, samples=source.manifest.samples))
    config = FinetuneConfig(task=source.manifest.task, seed=seed,
                            epochs=epochs, batch_size=batch_size)
    checkpoint, log = train_head(config, encoder, source)
    return encoder, checkpoint, log


def test_train_head_separable_reaches_high_val_auc():
    source, _ = generate_suite(easy_suite(seed=31))
    _, checkpoint, log = train_on(source, epochs=10, batch_size=64)
    assert max(log.val_metric) >= 0.99
    assert log.selected_epoch == int(np.argmax(log.val_metric))
    assert checkpoint.provenance["selection_metric"] == "roc_auc"


def test_train_head_shuffled_labels_near_chance():
    source, _ = generate_suite(easy_suite(seed=32, n_train=800, n_val=400))
    # destroy the label association, keep everything else
    perm = Rng(99).derive("shuffle-labels").permutation(
        len(source.manifest.records))
    labels = [source.manifest.records[i].label for i in perm]
    for rec, lab in zip(source.manifest.records, labels):
        rec.label = lab
    encoder, checkpoint, _ = train_on(source, epochs=3)
    val_idx = source.manifest.split_indices("val")
    batch_data = source.data[val_idx]
    probs = predict_proba(
        checkpoint.head, encoder,
        batch_data.reshape(len(val_idx), 1, source.manifest.samples))
    y = np.array([source.manifest.records[i].label for i in val_idx])
    cm = confusion_matrix(y, probs.argmax(axis=1), 2)
    assert abs(balanced_accuracy(cm) - 0.5) < 0.05


def test_train_head_bitwise_deterministic():
    source, _ = generate_suite(easy_suite(seed=33))
    _, ckpt_a, log_a = train_on(source, seed=7)
    _, ckpt_b, log_b = train_on(source, seed=7)
    assert ckpt_a.head.param_bytes() == ckpt_b.head.param_bytes()
    assert log_a.val_metric == log_b.val_metric
    _, ckpt_c, _ = train_on(source, seed=8)
    assert ckpt_a.head.param_bytes() != ckpt_c.head.param_bytes()


def test_train_head_keeps_encoder_frozen():
    source, _ = generate_suite(easy_suite(seed=34))
    encoder = build_encoder(EncoderSpec(
        "random_projection", channels=1, samples=16, out_dim=6))
    before = encoder.fingerprint()
    config = FinetuneConfig(task=source.manifest.task, seed=1, epochs=2,
                            batch_size=128)
    train_head(config, encoder, source)
    assert encoder.fingerprint() == before


class RecordingDataset(Dataset):
    """Counts which record indices training actually reads."""

    def __init__(self, manifest, data):
        super().__init__(manifest, data)
        self.read_indices = []

    def read_records(self, indices):
        self.read_indices.extend(int(i) for i in indices)
        return super().read_records(indices)


def test_train_head_never_reads_test_split():
    source, target = generate_suite(easy_suite(seed=35, n_target=100))
    # graft a poisoned test split onto the source dataset
    records = list(source.manifest.records)
    poisoned = []
    for rec in target.manifest.records:
        poisoned.append(ManifestRecord(
            id=rec.id, subject_id=rec.subject_id, channels=rec.channels,
            samples=rec.samples, sample_rate=rec.sample_rate, split="test",
            label=rec.label))
    manifest = DatasetManifest(source.manifest.task, "data.nadb",
                               records + poisoned)
    nan_block = np.full_like(target.data, np.nan)
    combined = RecordingDataset(
        manifest, np.concatenate([source.data, nan_block]))
    encoder = build_encoder(EncoderSpec("identity", channels=1, samples=16))
    config = FinetuneConfig(task=manifest.task, seed=2, epochs=2,
                            batch_size=128)
    checkpoint, _ = train_head(config, encoder, combined)
    test_indices = set(manifest.split_indices("test").tolist())
    assert set(combined.read_indices) & test_indices == set()
    assert np.isfinite(checkpoint.head.param_bytes() != b"").all()
    # a clean source run produces the identical checkpoint
    clean, _ = train_head(config, encoder, Dataset(source.manifest,
                                                   source.data))
    assert clean.head.param_bytes() == checkpoint.head.param_bytes()


def test_train_head_label_mismatch_errors():
    source, _ = generate_suite(easy_suite(seed=36))
    encoder = build_encoder(EncoderSpec("identity", channels=1, samples=16))
    config = FinetuneConfig(task=TaskSpec("multiclass", 4), seed=0, epochs=1)
    with pytest.raises(DataError):
        train_head(config, encoder, source)
