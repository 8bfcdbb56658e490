"""Dense numeric kernels: layers with hand-derived backward passes,
losses, and optimizers.

Everything operates on plain numpy arrays.  The pipeline runs in float32;
every kernel is dtype-preserving so the gradient-check tooling can run the
same code in float64.  Forward kernels return ``(out, cache)`` and each
backward kernel consumes the matching cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, xlogy

from .errors import ConfigError, ShapeError
from .rng import Rng

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_2d(name, x):
    if x.ndim != 2:
        raise ShapeError(name, "(B, D)", x.shape)


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------

def layernorm_forward(x, gamma, beta, eps=1e-5):
    """Row-wise normalization followed by the affine (gamma, beta) map."""
    _check_2d("layernorm input", x)
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be > 0, got {eps}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("layernorm gamma/beta", (x.shape[1],), (gamma.shape, beta.shape))
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    y = xhat * gamma + beta
    cache = (xhat, inv_std, gamma)
    return y, cache


def layernorm_backward(cache, dy):
    xhat, inv_std, gamma = cache
    if dy.shape != xhat.shape:
        raise ShapeError("layernorm upstream gradient", xhat.shape, dy.shape)
    d = xhat.shape[1]
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    # dx = inv_std/D * (D*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)), per row
    dx = (inv_std / d) * (
        d * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def linear_forward(x, w, b):
    _check_2d("linear input", x)
    if w.shape[0] != x.shape[1]:
        raise ShapeError("linear weight", (x.shape[1], "H"), w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear bias", (w.shape[1],), b.shape)
    y = x @ w + b
    cache = (x, w)
    return y, cache


def linear_backward(cache, dy):
    x, w = cache
    if dy.shape != (x.shape[0], w.shape[1]):
        raise ShapeError("linear upstream gradient", (x.shape[0], w.shape[1]), dy.shape)
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


def gelu_forward(x):
    """Exact erf-based GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    y = 0.5 * x * (1.0 + erf(x * INV_SQRT2))
    return y, x


def gelu_backward(cache, dy):
    x = cache
    if dy.shape != x.shape:
        raise ShapeError("gelu upstream gradient", x.shape, dy.shape)
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    pdf = INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def dropout_mask(rng: Rng, shape, rate: float, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: kept entries carry 1/(1-rate), dropped are 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.uniform(shape, dtype=np.float64) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


# ---------------------------------------------------------------------------
# probabilities and losses
# ---------------------------------------------------------------------------

def softmax(logits):
    _check_2d("softmax logits", logits)
    if logits.shape[1] < 2:
        raise ShapeError("softmax logits", "(B, K>=2)", logits.shape)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def entropy(probs):
    """Shannon entropy in nats; 0*log(0) counts as 0.

    Accepts a probability vector (returns a scalar) or a batch of rows
    (returns one value per row).
    """
    p = np.asarray(probs)
    h = -xlogy(p, p).sum(axis=-1)
    return float(h) if p.ndim == 1 else h


def cross_entropy(logits, labels):
    """Mean NLL over the batch; also returns the gradient w.r.t. logits."""
    _check_2d("cross-entropy logits", logits)
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError("cross-entropy labels", (b,), labels.shape)
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"labels must lie in [0, {k}), got range "
                          f"[{labels.min()}, {labels.max()}]")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = (lse - logits[np.arange(b), labels]).mean()
    dlogits = softmax(logits)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def entropy_loss(logits):
    """Mean predictive entropy of softmax(logits) and its logit gradient.

    d/dl_j of H(softmax(l)) is -p_j * (log p_j + H).
    """
    p = softmax(logits)
    logp = np.log(np.maximum(p, np.finfo(p.dtype).tiny))
    h = -(p * logp).sum(axis=1)
    loss = h.mean()
    b = logits.shape[0]
    dlogits = -(p * (logp + h[:, None])) / b
    return loss, dlogits


def marginal_diversity_loss(logits):
    """Negative entropy of the batch-mean prediction, sum p_hat log p_hat.

    Minimizing it spreads the marginal prediction over classes; its global
    minimum over the simplex is -log K at the uniform marginal.
    """
    p = softmax(logits)
    b = logits.shape[0]
    p_hat = p.mean(axis=0)
    logph = np.log(np.maximum(p_hat, np.finfo(p.dtype).tiny))
    loss = float((p_hat * logph).sum())
    # dL/dp_ik = (log p_hat_k + 1)/B, chained through the softmax Jacobian
    g = (logph + 1.0) / b
    dlogits = p * (g - (p * g).sum(axis=1, keepdims=True))
    return loss, dlogits


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    variant: str
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def clone(self) -> "OptimizerState":
        return OptimizerState(
            self.variant, self.step,
            {k: v.copy() for k, v in self.buffers.items()},
        )


def adamw_init(params: dict) -> OptimizerState:
    buffers = {}
    for name, p in params.items():
        buffers[f"m1/{name}"] = np.zeros_like(p)
        buffers[f"m2/{name}"] = np.zeros_like(p)
    return OptimizerState("adamw", 0, buffers)


def adamw_step(params: dict, grads: dict, state: OptimizerState, *,
               lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Decoupled-weight-decay Adam with bias-corrected moments."""
    if state.variant != "adamw":
        raise ConfigError(f"optimizer state is {state.variant}, expected adamw")
    state = state.clone()
    state.step += 1
    t = state.step
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name}", p.shape, g.shape)
        m1 = state.buffers[f"m1/{name}"]
        m2 = state.buffers[f"m2/{name}"]
        m1 = beta1 * m1 + (1.0 - beta1) * g
        m2 = beta2 * m2 + (1.0 - beta2) * g * g
        state.buffers[f"m1/{name}"] = m1
        state.buffers[f"m2/{name}"] = m2
        m1_hat = m1 / (1.0 - beta1 ** t)
        m2_hat = m2 / (1.0 - beta2 ** t)
        update = m1_hat / (np.sqrt(m2_hat) + eps)
        new_params[name] = (p - lr * weight_decay * p - lr * update).astype(p.dtype)
    return new_params, state


def sgd_momentum_init(params: dict) -> OptimizerState:
    buffers = {f"v/{name}": np.zeros_like(p) for name, p in params.items()}
    return OptimizerState("sgd-momentum", 0, buffers)


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState, *,
                      lr, momentum=0.9, weight_decay=0.0):
    """v <- momentum*v + g (+ wd*w); w <- w - lr*v."""
    if state.variant != "sgd-momentum":
        raise ConfigError(f"optimizer state is {state.variant}, expected sgd-momentum")
    state = state.clone()
    state.step += 1
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name}", p.shape, g.shape)
        v = state.buffers[f"v/{name}"]
        v = momentum * v + g + weight_decay * p
        state.buffers[f"v/{name}"] = v
        new_params[name] = (p - lr * v).astype(p.dtype)
    return new_params, state
