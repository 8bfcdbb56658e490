"""Fast built-in oracle checks, runnable without pytest via the CLI.

Each check recomputes an expected value through an independent route
(finite differences, brute-force pair counting, re-derivation) and
compares.  This is a smoke battery; the pytest suite is the full one.
"""

from __future__ import annotations

import tempfile

import numpy as np

from . import metrics, numerics
from .model import (Checkpoint, EncoderSpec, build_encoder,
                    head_trunk_forward, init_head)
from .rng import Rng
from .shiftbench.data import (Dataset, DatasetManifest, ManifestRecord,
                              TaskSpec, read_dataset, write_dataset)
from .tta import AdapterConfig, adapter_init


def numerical_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function, elementwise."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        hi = f(x)
        x[idx] = orig - h
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * h)
        it.iternext()
    return grad


def grads_close(analytic, numeric, rtol=1e-4, atol=1e-7) -> bool:
    return bool(np.all(np.abs(analytic - numeric)
                       <= atol + rtol * np.maximum(np.abs(analytic),
                                                   np.abs(numeric))))


def _check_layernorm_grad() -> bool:
    rng = Rng(11).derive("selftest-ln")
    x = rng.normal((3, 4), dtype=np.float64)
    gamma = rng.normal((4,), dtype=np.float64)
    beta = rng.normal((4,), dtype=np.float64)
    dy = rng.normal((3, 4), dtype=np.float64)
    _, cache = numerics.layernorm_forward(x, gamma, beta)
    dx, dgamma, dbeta = numerics.layernorm_backward(cache, dy)

    def loss(arr, which):
        parts = {"x": x, "gamma": gamma, "beta": beta, which: arr}
        y, _ = numerics.layernorm_forward(parts["x"], parts["gamma"],
                                          parts["beta"])
        return float((y * dy).sum())

    return (grads_close(dx, numerical_gradient(lambda a: loss(a, "x"), x.copy()))
            and grads_close(dgamma, numerical_gradient(
                lambda a: loss(a, "gamma"), gamma.copy()))
            and grads_close(dbeta, numerical_gradient(
                lambda a: loss(a, "beta"), beta.copy())))


def _check_entropy_values() -> bool:
    six = numerics.entropy(np.full(6, 1 / 6))
    skew = numerics.entropy(np.array([0.9, 0.1]))
    one_hot = numerics.entropy(np.array([0.0, 1.0]))
    return (abs(six - np.log(6)) < 1e-12
            and abs(skew - 0.325082973391448) < 1e-9
            and one_hot == 0.0)


def _check_roc_auc() -> bool:
    rng = Rng(12).derive("selftest-roc")
    for _ in range(20):
        n = int(rng.integers(5, 60))
        scores = np.round(rng.uniform((n,), dtype=np.float64), 2)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = (pos[:, None] > neg[None, :]).sum()
        ties = (pos[:, None] == neg[None, :]).sum()
        brute = (wins + 0.5 * ties) / (len(pos) * len(neg))
        if abs(metrics.roc_auc(scores, labels) - brute) > 1e-12:
            return False
    return True


def _check_rng_determinism() -> bool:
    a = Rng(99).derive("stream", 3).normal((8,), dtype=np.float64)
    b = Rng(99).derive("stream", 3).normal((8,), dtype=np.float64)
    c = Rng(99).derive("stream", 4).normal((8,), dtype=np.float64)
    return bool(np.array_equal(a, b) and not np.array_equal(a, c))


def _check_t3a_equivalence() -> bool:
    rng = Rng(13).derive("selftest-t3a")
    head = init_head(rng, feature_dim=6, num_classes=3, hidden=16)
    head.b2[:] = 0.0
    encoder = build_encoder(EncoderSpec("identity", channels=1, samples=6))
    checkpoint = Checkpoint(head=head, encoder_fingerprint=encoder.fingerprint())
    adapter = adapter_init(AdapterConfig("t3a"), checkpoint, encoder)
    z = rng.normal((64, 6))
    h = head_trunk_forward(head, z)
    base_logits, _ = numerics.linear_forward(h, head.w2, head.b2)
    anchor_probs = numerics.softmax(h @ adapter.prototypes)
    return bool(np.array_equal(anchor_probs.argmax(axis=1),
                               base_logits.argmax(axis=1)))


def _check_dataset_roundtrip() -> bool:
    rng = Rng(14).derive("selftest-io")
    data = rng.normal((6, 2, 5))
    records = [ManifestRecord(id=f"r{i}", subject_id=f"s{i % 3}", channels=2,
                              samples=5, sample_rate=5.0,
                              split="train" if i % 3 else "val", label=i % 2)
               for i in range(6)]
    dataset = Dataset(DatasetManifest(TaskSpec("binary", 2), "data.nadb",
                                      records), data)
    with tempfile.TemporaryDirectory() as tmp:
        write_dataset(dataset, tmp)
        loaded = read_dataset(tmp).load()
        return bool(np.array_equal(loaded.data, dataset.data))


CHECKS = [
    ("layernorm backward vs finite differences", _check_layernorm_grad),
    ("entropy closed-form values", _check_entropy_values),
    ("roc_auc vs pairwise brute force", _check_roc_auc),
    ("rng determinism and stream splitting", _check_rng_determinism),
    ("t3a anchor state matches source classifier", _check_t3a_equivalence),
    ("dataset round trip", _check_dataset_roundtrip),
]


def run_selftest(log=print) -> bool:
    ok = True
    for name, check in CHECKS:
        try:
            passed = check()
        except Exception as exc:  # noqa: BLE001 - report, don't crash
            passed = False
            log(f"FAIL {name}: {type(exc).__name__}: {exc}")
            ok = False
            continue
        log(("PASS " if passed else "FAIL ") + name)
        ok = ok and passed
    return ok
