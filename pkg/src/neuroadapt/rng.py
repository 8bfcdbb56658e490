"""Seeded, splittable random number generation.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's counter-based Philox generator.  Philox produces the same
bit stream on every platform for a given key, which is what makes run
outputs byte-reproducible.

Streams are split with ``derive(tag, index)``: the child key is
``SHA-256(parent_key || tag || index)`` truncated to Philox's 256-bit key.
Children are therefore independent per (tag, index) pair and adding new
tags never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-sha256split"

_DOMAIN = b"neuroadapt.rng.v1"


def _key_from_material(material: bytes) -> np.ndarray:
    # Philox4x64 takes a 128-bit key: the first half of the digest
    digest = hashlib.sha256(_DOMAIN + material).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class Rng:
    """Deterministic generator with a documented splitting scheme."""

    def __init__(self, seed: int, _material: bytes | None = None):
        if _material is None:
            # two's-complement mask so any Python int is a valid seed
            _material = (int(seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        self._material = _material
        self.seed = int(seed)
        self.algorithm = ALGORITHM
        key = _key_from_material(_material)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, tag: str, index: int = 0) -> "Rng":
        """Child stream, independent per (tag, index)."""
        material = (
            self._material
            + b"/"
            + tag.encode("utf-8")
            + b"#"
            + int(index).to_bytes(8, "little", signed=True)
        )
        return Rng(self.seed, _material=material)

    def derive_seed(self, tag: str, index: int = 0) -> int:
        """64-bit integer usable as an external seed (e.g. for a SuiteSpec)."""
        child = self.derive(tag, index)
        return int(np.frombuffer(child._material_digest(), dtype=np.uint64)[0])

    def _material_digest(self) -> bytes:
        return hashlib.sha256(_DOMAIN + self._material).digest()

    # -- sampling front-ends -------------------------------------------------

    def normal(self, shape, scale=1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * scale).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_with_priors(self, priors, n: int) -> np.ndarray:
        """Class labels drawn from a categorical distribution."""
        priors = np.asarray(priors, dtype=np.float64)
        return self._gen.choice(len(priors), size=n, p=priors / priors.sum())


def derive(base_seed: int, tag: str, index: int = 0) -> Rng:
    """The module-level split function: Rng(base_seed) split once."""
    return Rng(base_seed).derive(tag, index)
