"""Stage 2: the adaptation strategies behind one adapter contract.

Four methods share the contract:

* ``no_tta``  — frozen-checkpoint inference, the matched baseline.
* ``tent``    — online; one SGD-momentum step per incoming batch on the
  mean prediction entropy, touching only the normalization affine
  parameters; state persists across the stream.
* ``t3a``     — online and optimization-free; maintains per-class support
  sets of low-entropy features, classifies against their means.
* ``shot``    — offline; a full pass builds centroid-refined pseudo
  labels, then one gradient pass adapts the feature-side parameters
  while the classifier stays fixed.

Labels never reach adaptation code: ``run_adaptation`` strips them from
every batch before dispatching, so adapters only ever see unlabeled
batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import AdaptationError, ConfigError, DataError
from .model import (Checkpoint, Encoder, SUBSET_ADAPTER, SUBSET_NORM_AFFINE,
                    head_backward, head_forward, head_trunk_forward)
from .shiftbench.data import WindowBatch

METHODS = ("no_tta", "tent", "shot", "t3a")


@dataclass(frozen=True)
class TentConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    steps: int = 1


@dataclass(frozen=True)
class ShotConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    steps: int = 1
    mi_weight: float = 1.0
    pl_weight: float = 1.0  # pseudo-label loss weight


@dataclass(frozen=True)
class T3AConfig:
    filter_k: int = 20


@dataclass(frozen=True)
class AdapterConfig:
    method: str
    tent: TentConfig = TentConfig()
    shot: ShotConfig = ShotConfig()
    t3a: T3AConfig = T3AConfig()
    episodic: bool = False  # state accumulates across the stream

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown adaptation method {self.method!r}")
        if self.episodic:
            raise ConfigError("episodic resetting is not supported; "
                              "state persists across the stream")
        if self.t3a.filter_k < 1:
            raise ConfigError("filter_k must be >= 1")
        if self.shot.pl_weight < 0 or self.shot.mi_weight < 0:
            raise ConfigError("shot loss weights must be >= 0")
        if self.tent.steps < 1 or self.shot.steps < 1:
            raise ConfigError("steps must be >= 1")


def _require_unlabeled(batch: WindowBatch):
    if batch.labels is not None:
        raise DataError("adaptation received a labeled batch; labels must "
                        "be stripped at the adaptation boundary")


# ---------------------------------------------------------------------------
# No-TTA
# ---------------------------------------------------------------------------

class NoTTAAdapter:
    """Frozen-checkpoint inference."""

    def __init__(self, checkpoint: Checkpoint, encoder: Encoder):
        self.head = checkpoint.head
        self.encoder = encoder

    def process_batch(self, batch: WindowBatch) -> np.ndarray:
        _require_unlabeled(batch)
        z = self.encoder.encode(batch).z
        logits, _ = head_forward(self.head, z, train=False)
        return numerics.softmax(logits)

    def trace_entry(self) -> dict:
        return {}


# ---------------------------------------------------------------------------
# Tent
# ---------------------------------------------------------------------------

class TentAdapter:
    """Entropy minimization over the normalization affine parameters.

    Each batch: forward, mean-entropy loss, gradient restricted to
    (ln_gamma, ln_beta), SGD-momentum update, then predictions from the
    post-update parameters.  Momentum and the working parameters persist
    across batches.
    """

    def __init__(self, config: TentConfig, checkpoint: Checkpoint,
                 encoder: Encoder):
        self.config = config
        self.encoder = encoder
        self.head = checkpoint.head.copy()
        self.opt_state = numerics.sgd_momentum_init(self._trainable())
        self.batches_seen = 0
        self.last_loss = None

    def _trainable(self) -> dict:
        return {"ln_gamma": self.head.ln_gamma, "ln_beta": self.head.ln_beta}

    def step(self, batch: WindowBatch) -> np.ndarray:
        _require_unlabeled(batch)
        z = self.encoder.encode(batch).z
        for _ in range(self.config.steps):
            logits, cache = head_forward(self.head, z, train=False)
            loss, dlogits = numerics.entropy_loss(logits)
            if not np.isfinite(loss):
                raise AdaptationError("tent objective is non-finite",
                                      batch_index=self.batches_seen)
            grads = head_backward(cache, dlogits, SUBSET_NORM_AFFINE)
            subset_grads = {k: grads[k] for k in ("ln_gamma", "ln_beta")}
            updated, self.opt_state = numerics.sgd_momentum_step(
                self._trainable(), subset_grads, self.opt_state,
                lr=self.config.lr, momentum=self.config.momentum)
            self.head = self.head.with_updates(updated)
            self.last_loss = float(loss)
        self.batches_seen += 1
        logits, _ = head_forward(self.head, z, train=False)
        return numerics.softmax(logits)

    process_batch = step

    def trace_entry(self) -> dict:
        return {"tent_entropy": self.last_loss}


# ---------------------------------------------------------------------------
# T3A
# ---------------------------------------------------------------------------

@dataclass
class _SupportEntry:
    z: np.ndarray
    entropy: float
    order: int
    anchor: bool = False


class T3AAdapter:
    """Prototype adjustment over per-class support sets.

    Supports start from permanent anchors (the class weight vectors, at
    entropy zero) so the adjusted classifier reproduces the source
    classifier's scores (minus the bias) before any data arrives.  Each
    incoming feature lands in the support set of its predicted class;
    sets are filtered to the ``filter_k`` lowest-entropy entries (ties by
    insertion order, anchors never evicted) and each class prototype is
    the mean of its surviving set.  No network parameter is ever updated.
    """

    def __init__(self, config: T3AConfig, checkpoint: Checkpoint,
                 encoder: Encoder):
        self.config = config
        self.encoder = encoder
        self.head = checkpoint.head  # read-only: T3A never mutates it
        k = self.head.num_classes
        self._counter = 0
        self.supports = []
        for class_idx in range(k):
            anchor = _SupportEntry(
                z=self.head.class_weights[:, class_idx].copy(),
                entropy=0.0, order=self._next_order(), anchor=True)
            self.supports.append([anchor])
        # prototype matrix mirrors the final linear layer's layout so the
        # anchor-only state reproduces its matmul exactly
        self.prototypes = self.head.class_weights.copy()

    def _next_order(self) -> int:
        self._counter += 1
        return self._counter

    def _refresh_prototypes(self):
        for class_idx, entries in enumerate(self.supports):
            stacked = np.stack([e.z for e in entries])
            self.prototypes[:, class_idx] = stacked.mean(axis=0)

    def update_and_predict(self, features: np.ndarray) -> np.ndarray:
        """features: eval-mode trunk activations, (B, hidden)."""
        base_logits, _ = numerics.linear_forward(
            features, self.head.w2, self.head.b2)
        base_probs = numerics.softmax(base_logits)
        assigned = base_probs.argmax(axis=1)
        entropies = numerics.entropy(base_probs)
        for i in range(features.shape[0]):
            self.supports[assigned[i]].append(_SupportEntry(
                z=features[i].copy(), entropy=float(entropies[i]),
                order=self._next_order()))
        keep = self.config.filter_k
        for class_idx, entries in enumerate(self.supports):
            entries.sort(key=lambda e: (e.entropy, e.order))
            kept = entries[:keep]
            # anchors are permanent; with entropy 0 and the earliest order
            # they always sort first, but enforce the contract anyway
            for e in entries[keep:]:
                if e.anchor:
                    kept.append(e)
            self.supports[class_idx] = kept
        self._refresh_prototypes()
        return numerics.softmax(features @ self.prototypes)

    def process_batch(self, batch: WindowBatch) -> np.ndarray:
        _require_unlabeled(batch)
        z = self.encoder.encode(batch).z
        h = head_trunk_forward(self.head, z)
        return self.update_and_predict(h)

    def trace_entry(self) -> dict:
        return {"support_sizes": [len(s) for s in self.supports]}


# ---------------------------------------------------------------------------
# SHOT
# ---------------------------------------------------------------------------

def shot_pseudo_labels(features: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Two-round centroid refinement.

    Round one builds probability-weighted centroids and assigns every
    feature to the nearest one by cosine distance; round two rebuilds the
    centroids from those hard assignments and reassigns.  Classes with no
    weight are skipped, leaving their samples to the remaining classes.
    """
    if features.shape[0] == 0:
        raise DataError("empty target feature set")
    n, k = probs.shape

    def _assign(aff: np.ndarray) -> np.ndarray:
        weights = aff.sum(axis=0)
        kept = np.flatnonzero(weights > 1e-12)
        if kept.size == 0:
            raise DataError("no class carries any assignment weight")
        centroids = (aff[:, kept].T @ features) / weights[kept, None]
        fn = features / (np.linalg.norm(features, axis=1, keepdims=True) + 1e-12)
        cn = centroids / (np.linalg.norm(centroids, axis=1, keepdims=True) + 1e-12)
        cosine_dist = 1.0 - fn @ cn.T
        # ties (e.g. coincident centroids in degenerate geometries) go to
        # the class carrying more assignment weight
        tied = cosine_dist <= cosine_dist.min(axis=1, keepdims=True) + 1e-12
        score = np.where(tied, weights[kept][None, :], -np.inf)
        return kept[score.argmax(axis=1)]

    labels = _assign(probs.astype(np.float64))
    onehot = np.zeros((n, k), dtype=np.float64)
    onehot[np.arange(n), labels] = 1.0
    return _assign(onehot)


def shot_loss(logits: np.ndarray, pseudo_labels: np.ndarray,
              mi_weight: float = 1.0, pl_weight: float = 1.0):
    """Information-maximization term (mean prediction entropy plus the
    marginal anti-collapse diversity term) weighted by mi_weight, plus
    pseudo-label cross-entropy weighted by pl_weight.

    At the default weights this is exactly entropy + diversity + PL;
    both weights zero make the objective identically zero.  Returns
    (loss, dlogits, per-term values)."""
    l_ent, d_ent = numerics.entropy_loss(logits)
    l_div, d_div = numerics.marginal_diversity_loss(logits)
    l_pl, d_pl = numerics.cross_entropy(logits, pseudo_labels)
    loss = mi_weight * (l_ent + l_div) + pl_weight * l_pl
    dlogits = mi_weight * (d_ent + d_div) + pl_weight * d_pl
    return loss, dlogits, {"ent": float(l_ent), "div": float(l_div),
                           "pl": float(l_pl)}


class ShotAdapter:
    """Source-free offline adaptation: the classifier (w2, b2) is frozen,
    only the feature-side parameters (ln_gamma, ln_beta, w1, b1) move."""

    ADAPTER_KEYS = ("ln_gamma", "ln_beta", "w1", "b1")

    def __init__(self, config: ShotConfig, checkpoint: Checkpoint,
                 encoder: Encoder):
        self.config = config
        self.encoder = encoder
        self.head = checkpoint.head.copy()
        self._frozen_classifier = (checkpoint.head.w2.copy(),
                                   checkpoint.head.b2.copy())
        self.opt_state = numerics.sgd_momentum_init(self._trainable())
        self.pseudo_labels = {}
        self.adapted = False
        self.last_terms = None

    def _trainable(self) -> dict:
        return {k: getattr(self.head, k) for k in self.ADAPTER_KEYS}

    def offline_adapt(self, batches):
        """Full pass to extract features and build pseudo labels, then one
        gradient pass over the batch sequence."""
        batches = list(batches)
        if not batches:
            raise DataError("empty target set")
        for batch in batches:
            _require_unlabeled(batch)
        feats, probs = [], []
        encoded = []
        for batch in batches:
            z = self.encoder.encode(batch).z
            encoded.append(z)
            h = head_trunk_forward(self.head, z)
            logits, _ = numerics.linear_forward(h, self.head.w2, self.head.b2)
            feats.append(h)
            probs.append(numerics.softmax(logits))
        all_feats = np.concatenate(feats).astype(np.float64)
        all_probs = np.concatenate(probs).astype(np.float64)
        pseudo = shot_pseudo_labels(all_feats, all_probs)
        record_ids = [rid for b in batches for rid in b.record_ids]
        self.pseudo_labels = dict(zip(record_ids, pseudo.tolist()))
        start = 0
        for batch_index, (batch, z) in enumerate(zip(batches, encoded)):
            labels = pseudo[start:start + len(batch)]
            start += len(batch)
            for _ in range(self.config.steps):
                logits, cache = head_forward(self.head, z, train=False)
                loss, dlogits, terms = shot_loss(
                    logits, labels,
                    mi_weight=self.config.mi_weight,
                    pl_weight=self.config.pl_weight)
                if not np.isfinite(loss):
                    raise AdaptationError("shot objective is non-finite",
                                          batch_index=batch_index)
                grads = head_backward(cache, dlogits, SUBSET_ADAPTER)
                subset_grads = {k: grads[k] for k in self.ADAPTER_KEYS}
                updated, self.opt_state = numerics.sgd_momentum_step(
                    self._trainable(), subset_grads, self.opt_state,
                    lr=self.config.lr, momentum=0.0,
                    weight_decay=self.config.weight_decay)
                self.head = self.head.with_updates(updated)
                self.last_terms = terms
        w2, b2 = self._frozen_classifier
        if not (np.array_equal(w2, self.head.w2)
                and np.array_equal(b2, self.head.b2)):
            raise AdaptationError("classifier changed during shot adaptation")
        self.adapted = True

    def predict_batch(self, batch: WindowBatch) -> np.ndarray:
        _require_unlabeled(batch)
        z = self.encoder.encode(batch).z
        logits, _ = head_forward(self.head, z, train=False)
        return numerics.softmax(logits)

    def trace_entry(self) -> dict:
        return {"shot_terms": self.last_terms}


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def adapter_init(config: AdapterConfig, checkpoint: Checkpoint,
                 encoder: Encoder):
    if config.method == "no_tta":
        return NoTTAAdapter(checkpoint, encoder)
    if config.method == "tent":
        return TentAdapter(config.tent, checkpoint, encoder)
    if config.method == "t3a":
        return T3AAdapter(config.t3a, checkpoint, encoder)
    if config.method == "shot":
        return ShotAdapter(config.shot, checkpoint, encoder)
    raise ConfigError(f"unknown adaptation method {config.method!r}")


@dataclass
class AdaptationResult:
    probs: np.ndarray
    record_ids: tuple
    trace: list = field(default_factory=list)
    adapter: object = None

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def run_adaptation(config: AdapterConfig, checkpoint: Checkpoint,
                   encoder: Encoder, batches,
                   collect_trace: bool = False) -> AdaptationResult:
    """Adapt over a target stream and return predictions for every record
    in stream order.  Labels are stripped here, before any adaptation code
    runs; online methods carry state batch to batch, shot adapts offline
    first and then predicts the full set."""
    stripped = [b.without_labels() for b in batches]
    if not stripped:
        raise DataError("empty target stream")
    adapter = adapter_init(config, checkpoint, encoder)
    probs_chunks = []
    trace = []
    if config.method == "shot":
        adapter.offline_adapt(stripped)
        for i, batch in enumerate(stripped):
            probs_chunks.append(adapter.predict_batch(batch))
            if collect_trace:
                trace.append({"batch": i, **_batch_stats(probs_chunks[-1]),
                              **adapter.trace_entry()})
    else:
        for i, batch in enumerate(stripped):
            try:
                probs_chunks.append(adapter.process_batch(batch))
            except AdaptationError as exc:
                if exc.batch_index is None:
                    raise AdaptationError(str(exc), batch_index=i) from exc
                raise
            if collect_trace:
                trace.append({"batch": i, **_batch_stats(probs_chunks[-1]),
                              **adapter.trace_entry()})
    record_ids = tuple(rid for b in stripped for rid in b.record_ids)
    return AdaptationResult(probs=np.concatenate(probs_chunks),
                            record_ids=record_ids, trace=trace,
                            adapter=adapter)


def _batch_stats(probs: np.ndarray) -> dict:
    return {"mean_entropy": float(np.mean(numerics.entropy(probs)))}
