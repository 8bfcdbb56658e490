"""Frozen feature extractors plus the shared classifier head.

The model is a frozen encoder followed by a small trainable head
(LayerNorm -> Linear(hidden) -> GELU -> Dropout -> Linear(num_classes)).
Backward passes can be restricted to a named parameter subset, which is
how the adaptation methods touch only the pieces they are allowed to.

Checkpoint layout (``*.ckpt``): header ``NACP`` (4 bytes), little-endian
u32 [version, feature_dim, num_classes, hidden], little-endian f32
dropout_rate, 32-byte encoder fingerprint digest; then the parameter
blocks as little-endian float32 in declaration order (ln_gamma, ln_beta,
w1, b1, w2, b2).  A ``*.ckpt.json`` sidecar carries training provenance.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics
from .errors import ConfigError, DatasetIOError, ShapeError
from .rng import Rng
from .shiftbench.data import WindowBatch, normalize_p95

ENCODER_VARIANTS = ("identity", "random_projection", "two_layer")

PARAM_ORDER = ("ln_gamma", "ln_beta", "w1", "b1", "w2", "b2")

SUBSET_ALL = "all_head"
SUBSET_NORM_AFFINE = "norm_affine"
SUBSET_ADAPTER = "adapter"
SUBSET_NONE = "none"

PARAM_SUBSETS = {
    SUBSET_ALL: frozenset(PARAM_ORDER),
    SUBSET_NORM_AFFINE: frozenset({"ln_gamma", "ln_beta"}),
    SUBSET_ADAPTER: frozenset({"ln_gamma", "ln_beta", "w1", "b1"}),
    SUBSET_NONE: frozenset(),
}

CHECKPOINT_MAGIC = b"NACP"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIf32s")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderSpec:
    variant: str
    channels: int
    samples: int
    out_dim: Optional[int] = None
    hidden: Optional[int] = None
    seed: int = 0
    normalize_p95: bool = False

    def __post_init__(self):
        if self.variant not in ENCODER_VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.variant == "random_projection" and not self.out_dim:
            raise ConfigError("random_projection needs out_dim")
        if self.variant == "two_layer" and not (self.out_dim and self.hidden):
            raise ConfigError("two_layer needs hidden and out_dim")

    @property
    def feature_dim(self) -> int:
        if self.variant == "identity":
            return self.channels * self.samples
        return int(self.out_dim)

    def key(self) -> str:
        parts = [self.variant, f"c{self.channels}", f"t{self.samples}"]
        if self.out_dim:
            parts.append(f"d{self.out_dim}")
        if self.hidden:
            parts.append(f"h{self.hidden}")
        parts.append(f"s{self.seed}")
        if self.normalize_p95:
            parts.append("p95")
        return "-".join(parts)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "channels": self.channels,
            "samples": self.samples, "out_dim": self.out_dim,
            "hidden": self.hidden, "seed": self.seed,
            "normalize_p95": self.normalize_p95,
        }


@dataclass
class FeatureBatch:
    z: np.ndarray
    encoder_id: str
    record_ids: tuple = ()


def mean_pool(vectors) -> np.ndarray:
    """Arithmetic mean of a nonempty sequence of equal-length vectors."""
    arr = np.asarray(vectors)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ShapeError("mean_pool input", "(S>=1, D)", arr.shape)
    return arr.mean(axis=0)


class Encoder:
    """A frozen feature map.  Parameters are fixed at construction and
    identical for identical (spec, seed); ``fingerprint`` hashes both the
    spec and the parameter bytes so freeze violations are detectable."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        self.params = {}
        rng = Rng(spec.seed).derive("encoder-init")
        c, t = spec.channels, spec.samples
        if spec.variant == "random_projection":
            self.params["w"] = rng.normal((c * t, spec.out_dim),
                                          scale=1.0 / np.sqrt(c * t))
        elif spec.variant == "two_layer":
            self.params["w1"] = rng.derive("w1").normal(
                (t, spec.hidden), scale=1.0 / np.sqrt(t))
            self.params["b1"] = rng.derive("b1").normal((spec.hidden,), scale=0.1)
            self.params["w2"] = rng.derive("w2").normal(
                (spec.hidden, spec.out_dim), scale=1.0 / np.sqrt(spec.hidden))
            self.params["b2"] = rng.derive("b2").normal((spec.out_dim,), scale=0.1)

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def _windows(self, data: np.ndarray) -> np.ndarray:
        c, t = self.spec.channels, self.spec.samples
        if data.ndim == 2 and self.spec.variant == "identity":
            if data.shape[1] != c * t:
                raise ShapeError("encoder input", ("B", c * t), data.shape)
            return data.reshape(data.shape[0], c, t)
        if data.ndim != 3 or data.shape[1:] != (c, t):
            raise ShapeError("encoder input", ("B", c, t), data.shape)
        return data

    def encode(self, batch) -> FeatureBatch:
        data = batch.data if isinstance(batch, WindowBatch) else np.asarray(batch)
        record_ids = batch.record_ids if isinstance(batch, WindowBatch) else ()
        data = self._windows(data)
        if self.spec.normalize_p95:
            data = np.stack([normalize_p95(w) for w in data])
        b, c, t = data.shape
        if self.spec.variant == "identity":
            z = data.reshape(b, c * t)
        elif self.spec.variant == "random_projection":
            z = data.reshape(b, c * t) @ self.params["w"]
        else:  # two_layer: per-channel MLP, mean-pooled over channels
            flat = data.reshape(b * c, t)
            h, _ = numerics.gelu_forward(flat @ self.params["w1"] + self.params["b1"])
            per_channel = (h @ self.params["w2"] + self.params["b2"]).reshape(
                b, c, self.spec.out_dim)
            z = np.stack([mean_pool(per_channel[i]) for i in range(b)])
        return FeatureBatch(z=z.astype(np.float32), encoder_id=self.spec.key(),
                            record_ids=record_ids)


def build_encoder(spec: EncoderSpec) -> Encoder:
    return Encoder(spec)


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

@dataclass
class HeadParams:
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dropout_rate: float = 0.1

    @property
    def feature_dim(self) -> int:
        return self.ln_gamma.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    @property
    def class_weights(self) -> np.ndarray:
        """Final-layer weight matrix (hidden, K); column k is the weight
        vector of class k, the vector prototype-based adaptation seeds
        its supports with.  The bias b2 is not part of it."""
        return self.w2

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self) -> "HeadParams":
        return HeadParams(*(getattr(self, n).copy() for n in PARAM_ORDER),
                          dropout_rate=self.dropout_rate)

    def with_updates(self, updates: dict) -> "HeadParams":
        return replace(self, **updates)

    def param_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(getattr(self, n), dtype="<f4").tobytes()
            for n in PARAM_ORDER)


def init_head(rng: Rng, feature_dim: int, num_classes: int,
              hidden: int = 128, dropout_rate: float = 0.1) -> HeadParams:
    if num_classes < 2:
        raise ConfigError("head needs at least 2 classes")
    return HeadParams(
        ln_gamma=np.ones(feature_dim, dtype=np.float32),
        ln_beta=np.zeros(feature_dim, dtype=np.float32),
        w1=rng.derive("head-w1").normal((feature_dim, hidden),
                                        scale=np.sqrt(2.0 / feature_dim)),
        b1=np.zeros(hidden, dtype=np.float32),
        w2=rng.derive("head-w2").normal((hidden, num_classes),
                                        scale=np.sqrt(1.0 / hidden)),
        b2=np.zeros(num_classes, dtype=np.float32),
        dropout_rate=dropout_rate,
    )


def head_forward(params: HeadParams, z: np.ndarray, train: bool = False,
                 rng: Optional[Rng] = None):
    """Forward pass; eval mode is deterministic (dropout off)."""
    if z.ndim != 2 or z.shape[1] != params.feature_dim:
        raise ShapeError("head input", ("B", params.feature_dim), z.shape)
    if train and params.dropout_rate > 0 and rng is None:
        raise ConfigError("train-mode forward with dropout needs an rng")
    x, ln_cache = numerics.layernorm_forward(z, params.ln_gamma, params.ln_beta)
    h_pre, lin1_cache = numerics.linear_forward(x, params.w1, params.b1)
    h, gelu_cache = numerics.gelu_forward(h_pre)
    if train and params.dropout_rate > 0:
        mask = numerics.dropout_mask(rng, h.shape, params.dropout_rate,
                                     dtype=h.dtype)
        h = h * mask
    else:
        mask = None
    logits, lin2_cache = numerics.linear_forward(h, params.w2, params.b2)
    cache = (ln_cache, lin1_cache, gelu_cache, mask, lin2_cache)
    return logits, cache


def head_trunk_forward(params: HeadParams, z: np.ndarray) -> np.ndarray:
    """Eval-mode activations feeding the final linear layer (the feature
    space the class weight vectors live in)."""
    if z.ndim != 2 or z.shape[1] != params.feature_dim:
        raise ShapeError("head input", ("B", params.feature_dim), z.shape)
    x, _ = numerics.layernorm_forward(z, params.ln_gamma, params.ln_beta)
    h_pre, _ = numerics.linear_forward(x, params.w1, params.b1)
    h, _ = numerics.gelu_forward(h_pre)
    return h


def head_backward(cache, dlogits: np.ndarray, subset: str = SUBSET_ALL) -> dict:
    """Gradients for the selected parameter subset; unselected entries are
    exact zeros."""
    if subset not in PARAM_SUBSETS:
        raise ConfigError(f"unknown parameter subset {subset!r}")
    ln_cache, lin1_cache, gelu_cache, mask, lin2_cache = cache
    dh, dw2, db2 = numerics.linear_backward(lin2_cache, dlogits)
    if mask is not None:
        dh = dh * mask
    dh_pre = numerics.gelu_backward(gelu_cache, dh)
    dx, dw1, db1 = numerics.linear_backward(lin1_cache, dh_pre)
    _, dgamma, dbeta = numerics.layernorm_backward(ln_cache, dx)
    grads = {"ln_gamma": dgamma, "ln_beta": dbeta,
             "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
    selected = PARAM_SUBSETS[subset]
    for name in grads:
        if name not in selected:
            grads[name] = np.zeros_like(grads[name])
    return grads


def predict_proba(params: HeadParams, encoder: Encoder, batch) -> np.ndarray:
    features = encoder.encode(batch)
    logits, _ = head_forward(params, features.z, train=False)
    return numerics.softmax(logits)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    head: HeadParams
    encoder_fingerprint: str
    provenance: dict = field(default_factory=dict)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(bytes.fromhex(self.encoder_fingerprint))
        h.update(self.head.param_bytes())
        return h.hexdigest()


def save_checkpoint(path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    head = checkpoint.head
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, head.feature_dim,
        head.num_classes, head.hidden, head.dropout_rate,
        bytes.fromhex(checkpoint.encoder_fingerprint))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(head.param_bytes())
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(checkpoint.provenance, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise DatasetIOError(f"{path}: too small for a checkpoint header")
    magic, version, d, k, hidden, dropout, enc_digest = _CKPT_HEADER.unpack(
        blob[:_CKPT_HEADER.size])
    if magic != CHECKPOINT_MAGIC:
        raise DatasetIOError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DatasetIOError(f"{path}: unsupported checkpoint version {version}")
    shapes = [("ln_gamma", (d,)), ("ln_beta", (d,)), ("w1", (d, hidden)),
              ("b1", (hidden,)), ("w2", (hidden, k)), ("b2", (k,))]
    expected = _CKPT_HEADER.size + sum(int(np.prod(s)) for _, s in shapes) * 4
    if len(blob) != expected:
        raise DatasetIOError(
            f"{path}: expected {expected} bytes, found {len(blob)}")
    offset = _CKPT_HEADER.size
    arrays = {}
    for name, shape in shapes:
        nbytes = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(
            blob[offset:offset + nbytes], dtype="<f4").reshape(shape).copy()
        offset += nbytes
    sidecar = path.with_suffix(path.suffix + ".json")
    provenance = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    head = HeadParams(dropout_rate=float(dropout), **arrays)
    return Checkpoint(head=head, encoder_fingerprint=enc_digest.hex(),
                      provenance=provenance)
