"""Stage 1: supervised head training on labeled source data.

The encoder stays frozen; only the head is trained (AdamW over
cross-entropy, dropout active).  Model selection happens exclusively on
the validation split: ROC-AUC for binary tasks, Cohen's kappa for
multiclass, best epoch wins, earliest epoch on ties.  The training path
never touches test-split records.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics, numerics
from .errors import DataError, SplitError
from .model import (Checkpoint, Encoder, HeadParams, head_forward, init_head,
                    SUBSET_ALL, head_backward)
from .rng import Rng
from .shiftbench.data import TaskSpec

ADAMW_BETA1 = 0.9
ADAMW_BETA2 = 0.999
ADAMW_EPS = 1e-8


@dataclass(frozen=True)
class FinetuneConfig:
    task: TaskSpec
    seed: int
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 512
    hidden: int = 128
    dropout_rate: float = 0.1

    @property
    def selection_metric(self) -> str:
        return "roc_auc" if self.task.is_binary else "cohen_kappa"

    def to_dict(self) -> dict:
        return {
            "task": {"kind": self.task.kind, "num_classes": self.task.num_classes},
            "seed": self.seed, "lr": self.lr, "weight_decay": self.weight_decay,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "hidden": self.hidden, "dropout_rate": self.dropout_rate,
            "selection_metric": self.selection_metric,
            # optimizer constants are decisions, not tuned values; recorded
            # so runs are fully described by their metadata
            "adamw_beta1": ADAMW_BETA1, "adamw_beta2": ADAMW_BETA2,
            "adamw_eps": ADAMW_EPS, "lr_schedule": "constant",
        }


@dataclass
class TrainingLog:
    metric_name: str
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    selected_epoch: int = -1

    def to_dict(self) -> dict:
        return {"metric_name": self.metric_name,
                "train_loss": self.train_loss,
                "val_metric": self.val_metric,
                "selected_epoch": self.selected_epoch}


def split_patients(manifest, seed: int, ratio: float = 0.8):
    """Deterministic subject-level partition (train ids, val ids).

    The ratio applies to the subject count (floor for train, clamped so
    both sides stay nonempty).
    """
    subjects = manifest.subject_ids() if hasattr(manifest, "subject_ids") \
        else sorted(set(manifest))
    n = len(subjects)
    if n < 2:
        raise SplitError(f"need at least 2 subjects to split, got {n}")
    if not 0.0 < ratio < 1.0:
        raise SplitError(f"split ratio must be in (0, 1), got {ratio}")
    order = Rng(seed).derive("patient-split").permutation(n)
    n_train = min(max(int(np.floor(ratio * n)), 1), n - 1)
    train = sorted(subjects[i] for i in order[:n_train])
    val = sorted(subjects[i] for i in order[n_train:])
    return train, val


def select_model(log: TrainingLog) -> int:
    """Epoch index attaining the best validation metric, earliest on ties."""
    if not log.val_metric:
        raise DataError("empty validation history")
    return int(np.argmax(np.asarray(log.val_metric)))


def _validation_metric(params: HeadParams, encoder: Encoder, source,
                       task: TaskSpec, batch_size: int) -> float:
    y_true, y_pred, pos_scores = [], [], []
    for batch in source.batches("val", batch_size):
        features = encoder.encode(batch)
        logits, _ = head_forward(params, features.z, train=False)
        probs = numerics.softmax(logits)
        y_true.append(batch.labels)
        y_pred.append(probs.argmax(axis=1))
        if task.is_binary:
            pos_scores.append(probs[:, 1])
    y_true = np.concatenate(y_true)
    if task.is_binary:
        return metrics.roc_auc(np.concatenate(pos_scores), y_true)
    cm = metrics.confusion_matrix(y_true, np.concatenate(y_pred),
                                  task.num_classes)
    return metrics.cohen_kappa(cm)


def train_head(config: FinetuneConfig, encoder: Encoder, source):
    """Train the head on the source train split and return the checkpoint
    of the best-validation epoch plus the full training log.

    `source` is a Dataset or DatasetReader with train/val splits.  The
    run is fully determined by (config, encoder, data): epoch shuffles
    and dropout masks come from streams derived from config.seed.
    """
    task = config.task
    if task.num_classes != source.manifest.task.num_classes:
        raise DataError(
            f"config says {task.num_classes} classes, manifest says "
            f"{source.manifest.task.num_classes}")
    encoder_fp_before = encoder.fingerprint()
    root = Rng(config.seed)
    params = init_head(root.derive("head-init"), encoder.feature_dim,
                       task.num_classes, hidden=config.hidden,
                       dropout_rate=config.dropout_rate)
    opt_state = numerics.adamw_init(params.as_dict())

    log = TrainingLog(metric_name=config.selection_metric)
    snapshots = []
    for epoch in range(config.epochs):
        shuffle_rng = root.derive("shuffle", epoch)
        dropout_rng = root.derive("dropout", epoch)
        losses = []
        for batch in source.batches("train", config.batch_size,
                                    order="seeded-shuffle", rng=shuffle_rng):
            if batch.labels is None:
                raise DataError("training batch is missing labels")
            features = encoder.encode(batch)
            logits, cache = head_forward(params, features.z, train=True,
                                         rng=dropout_rng)
            loss, dlogits = numerics.cross_entropy(logits, batch.labels)
            grads = head_backward(cache, dlogits, SUBSET_ALL)
            new_params, opt_state = numerics.adamw_step(
                params.as_dict(), grads, opt_state,
                lr=config.lr, beta1=ADAMW_BETA1, beta2=ADAMW_BETA2,
                eps=ADAMW_EPS, weight_decay=config.weight_decay)
            params = params.with_updates(new_params)
            losses.append(float(loss))
        log.train_loss.append(float(np.mean(losses)))
        log.val_metric.append(float(_validation_metric(
            params, encoder, source, task, config.batch_size)))
        snapshots.append(params.copy())

    log.selected_epoch = select_model(log)
    if encoder.fingerprint() != encoder_fp_before:
        raise DataError("encoder parameters changed during fine-tuning")
    best = snapshots[log.selected_epoch]
    checkpoint = Checkpoint(
        head=best,
        encoder_fingerprint=encoder_fp_before,
        provenance={
            "config": config.to_dict(),
            "selected_epoch": log.selected_epoch,
            "selection_metric": config.selection_metric,
            "val_metric": log.val_metric,
            "train_loss": log.train_loss,
        },
    )
    return checkpoint, log
