import numpy as np
import pytest

from neuroadapt import numerics
from neuroadapt.errors import ConfigError, ShapeError
from neuroadapt.model import (Checkpoint, EncoderSpec, HeadParams,
                              PARAM_SUBSETS, SUBSET_ADAPTER, SUBSET_ALL,
                              SUBSET_NONE, SUBSET_NORM_AFFINE, build_encoder,
                              head_backward, head_forward, head_trunk_forward,
                              init_head, load_checkpoint, mean_pool,
                              predict_proba, save_checkpoint)
from neuroadapt.rng import Rng
from neuroadapt.shiftbench.data import WindowBatch

from conftest import assert_grads_close, numerical_gradient


def make_batch(rng, n=6, channels=2, samples=5):
    return WindowBatch(
        data=rng.normal((n, channels, samples)),
        labels=None,
        record_ids=tuple(f"r{i}" for i in range(n)),
        subject_ids=tuple("s0" for _ in range(n)),
    )


def head_for(dim, k=3, hidden=16, seed=0, dropout=0.1):
    return init_head(Rng(seed).derive("head"), dim, k, hidden=hidden,
                     dropout_rate=dropout)


# -- encoders ---------------------------------------------------------------

def test_identity_encoder_flattens_windows():
    enc = build_encoder(EncoderSpec("identity", channels=2, samples=5))
    batch = make_batch(Rng(1).derive("b"))
    features = enc.encode(batch)
    assert np.array_equal(features.z, batch.data.reshape(6, 10))


def test_identity_encoder_accepts_flat_features():
    enc = build_encoder(EncoderSpec("identity", channels=1, samples=8))
    flat = Rng(2).derive("flat").normal((4, 8))
    assert np.array_equal(enc.encode(flat).z, flat)


def test_random_projection_deterministic_per_seed():
    spec = EncoderSpec("random_projection", channels=2, samples=5,
                       out_dim=7, seed=3)
    batch = make_batch(Rng(4).derive("b"))
    a = build_encoder(spec).encode(batch).z
    b = build_encoder(spec).encode(batch).z
    assert np.array_equal(a, b)
    other = build_encoder(EncoderSpec("random_projection", channels=2,
                                      samples=5, out_dim=7, seed=4))
    assert not np.array_equal(a, other.encode(batch).z)


def test_two_layer_encoder_zero_window_is_bias_path_constant():
    spec = EncoderSpec("two_layer", channels=3, samples=5, hidden=6,
                       out_dim=4, seed=5)
    enc = build_encoder(spec)
    zeros = WindowBatch(np.zeros((2, 3, 5), dtype=np.float32), None,
                        ("a", "b"), ("s", "s"))
    z = enc.encode(zeros).z
    # forward of a zero window by hand: gelu(b1) @ w2 + b2, equal per window
    h, _ = numerics.gelu_forward(enc.params["b1"][None, :])
    expected = (h @ enc.params["w2"] + enc.params["b2"])[0]
    assert np.allclose(z[0], expected, atol=1e-6)
    assert np.array_equal(z[0], z[1])


def test_encoder_shape_errors_name_expected_and_actual():
    enc = build_encoder(EncoderSpec("random_projection", channels=2,
                                    samples=5, out_dim=3))
    with pytest.raises(ShapeError, match=r"\('B', 2, 5\)"):
        enc.encode(np.zeros((4, 3, 5), dtype=np.float32))


def test_encoder_fingerprint_stable_and_spec_sensitive():
    spec = EncoderSpec("random_projection", channels=2, samples=5, out_dim=3)
    assert build_encoder(spec).fingerprint() == build_encoder(spec).fingerprint()
    other = EncoderSpec("random_projection", channels=2, samples=5,
                        out_dim=3, seed=9)
    assert build_encoder(spec).fingerprint() != build_encoder(other).fingerprint()


def test_encoder_p95_normalization_flag():
    spec = EncoderSpec("identity", channels=1, samples=50, normalize_p95=True)
    enc = build_encoder(spec)
    rng = Rng(6).derive("norm")
    batch = WindowBatch(rng.normal((3, 1, 50)), None, ("a", "b", "c"),
                        ("s",) * 3)
    scaled = WindowBatch(batch.data * 10.0, None, batch.record_ids,
                         batch.subject_ids)
    a = enc.encode(batch).z
    b = enc.encode(scaled).z
    assert np.abs(a - b).max() < 1e-5


# -- mean pooling -------------------------------------------------------------

def test_mean_pool_cases():
    v = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(mean_pool([v]), v)
    assert np.array_equal(mean_pool([v, -v]), np.zeros(3))
    rng = Rng(7).derive("pool")
    vs = rng.normal((3, 4), dtype=np.float64)
    assert np.allclose(mean_pool(vs), (vs[0] + vs[1] + vs[2]) / 3.0)
    with pytest.raises(ShapeError):
        mean_pool(np.zeros((0, 3)))


# -- head forward -------------------------------------------------------------

def test_head_forward_bias_only_params():
    head = head_for(4, k=3, hidden=5)
    head.ln_gamma[:] = 0
    head.w1[:] = 0
    head.w2[:] = 0
    head.b1[:] = 0
    head.b2[:] = np.array([1.0, 2.0, -1.0])
    z = Rng(8).derive("z").normal((6, 4))
    logits, _ = head_forward(head, z, train=False)
    assert np.allclose(logits, np.broadcast_to(head.b2, (6, 3)), atol=1e-6)


def test_head_forward_dropout_zero_equals_eval_bitwise():
    head = head_for(4, dropout=0.0)
    z = Rng(9).derive("z").normal((5, 4))
    train_logits, _ = head_forward(head, z, train=True, rng=Rng(1))
    eval_logits, _ = head_forward(head, z, train=False)
    assert np.array_equal(train_logits, eval_logits)


def test_head_forward_eval_is_pure():
    head = head_for(6)
    z = Rng(10).derive("z").normal((7, 6))
    a, _ = head_forward(head, z, train=False)
    b, _ = head_forward(head, z, train=False)
    assert np.array_equal(a, b)


def test_head_forward_matches_kernel_composition():
    head = head_for(5, k=4, hidden=8, seed=2)
    z = Rng(11).derive("z").normal((3, 5))
    logits, _ = head_forward(head, z, train=False)
    x, _ = numerics.layernorm_forward(z, head.ln_gamma, head.ln_beta)
    h_pre, _ = numerics.linear_forward(x, head.w1, head.b1)
    h, _ = numerics.gelu_forward(h_pre)
    manual, _ = numerics.linear_forward(h, head.w2, head.b2)
    assert np.array_equal(logits, manual)


def test_head_forward_train_needs_rng():
    head = head_for(4)
    with pytest.raises(ConfigError):
        head_forward(head, np.zeros((2, 4), dtype=np.float32), train=True)


def test_head_trunk_matches_forward_prefix():
    head = head_for(5, hidden=8)
    z = Rng(12).derive("z").normal((4, 5))
    h = head_trunk_forward(head, z)
    logits, _ = head_forward(head, z, train=False)
    manual, _ = numerics.linear_forward(h, head.w2, head.b2)
    assert np.array_equal(logits, manual)


# -- head backward --------------------------------------------------------

def as_float64_head(head):
    return HeadParams(*(getattr(head, n).astype(np.float64)
                        for n in ("ln_gamma", "ln_beta", "w1", "b1", "w2", "b2")),
                      dropout_rate=head.dropout_rate)


def test_head_backward_subset_none_is_all_zero():
    head = head_for(4)
    z = Rng(13).derive("z").normal((3, 4))
    _, cache = head_forward(head, z, train=False)
    grads = head_backward(cache, np.ones((3, head.num_classes),
                                         dtype=np.float32), SUBSET_NONE)
    assert all(not g.any() for g in grads.values())


def test_head_backward_norm_affine_masks_linear_grads():
    head = head_for(4)
    z = Rng(14).derive("z").normal((3, 4))
    _, cache = head_forward(head, z, train=False)
    grads = head_backward(cache, np.ones((3, head.num_classes),
                                         dtype=np.float32),
                          SUBSET_NORM_AFFINE)
    assert grads["ln_gamma"].any() or grads["ln_beta"].any()
    for name in ("w1", "b1", "w2", "b2"):
        assert not grads[name].any()


@pytest.mark.parametrize("subset", [SUBSET_ALL, SUBSET_ADAPTER,
                                    SUBSET_NORM_AFFINE])
def test_head_backward_matches_finite_differences(subset):
    rng = Rng(15).derive("head-fd")
    head64 = as_float64_head(head_for(4, k=3, hidden=6, seed=3))
    z = rng.normal((5, 4), dtype=np.float64)
    labels = rng.derive("y").integers(0, 3, 5)
    logits, cache = head_forward(head64, z, train=False)
    _, dlogits = numerics.cross_entropy(logits, labels)
    grads = head_backward(cache, dlogits, subset)

    def loss_with(name, arr):
        trial = head64.with_updates({name: arr})
        trial_logits, _ = head_forward(trial, z, train=False)
        loss, _ = numerics.cross_entropy(trial_logits, labels)
        return float(loss)

    for name in PARAM_SUBSETS[subset]:
        numeric = numerical_gradient(lambda a: loss_with(name, a),
                                     getattr(head64, name))
        assert_grads_close(grads[name], numeric, what=name)
    for name in set(grads) - PARAM_SUBSETS[subset]:
        assert not grads[name].any()


def test_head_backward_through_dropout_mask():
    # train-mode gradients must respect the sampled mask
    head64 = as_float64_head(head_for(4, k=2, hidden=6, seed=5, dropout=0.5))
    z = Rng(16).derive("z").normal((4, 4), dtype=np.float64)
    labels = np.array([0, 1, 1, 0])
    logits, cache = head_forward(head64, z, train=True,
                                 rng=Rng(17).derive("mask"))
    mask = cache[3]
    _, dlogits = numerics.cross_entropy(logits, labels)
    grads = head_backward(cache, dlogits, SUBSET_ALL)

    def loss_with(name, arr):
        trial = head64.with_updates({name: arr})
        x, _ = numerics.layernorm_forward(z, trial.ln_gamma, trial.ln_beta)
        h_pre, _ = numerics.linear_forward(x, trial.w1, trial.b1)
        h, _ = numerics.gelu_forward(h_pre)
        out, _ = numerics.linear_forward(h * mask, trial.w2, trial.b2)
        loss, _ = numerics.cross_entropy(out, labels)
        return float(loss)

    for name in ("w1", "w2", "ln_gamma"):
        numeric = numerical_gradient(lambda a: loss_with(name, a),
                                     getattr(head64, name))
        assert_grads_close(grads[name], numeric, what=f"dropout {name}")


# -- predict_proba --------------------------------------------------------

def test_predict_proba_zero_logits_uniform():
    head = head_for(10, k=4)
    head.w2[:] = 0
    head.b2[:] = 0
    enc = build_encoder(EncoderSpec("identity", channels=2, samples=5))
    batch = make_batch(Rng(18).derive("b"))
    probs = predict_proba(head, enc, batch)
    assert np.allclose(probs, 0.25)


def test_predict_proba_invariant_to_constant_bias_shift():
    head = head_for(10, k=3)
    enc = build_encoder(EncoderSpec("identity", channels=2, samples=5))
    batch = make_batch(Rng(19).derive("b"))
    base = predict_proba(head, enc, batch)
    shifted = head.copy()
    shifted.b2 += 3.25
    moved = predict_proba(shifted, enc, batch)
    assert np.abs(base - moved).max() < 1e-5


def test_predict_proba_matches_manual_pipeline():
    head = head_for(10, k=3, seed=7)
    enc = build_encoder(EncoderSpec("identity", channels=2, samples=5))
    batch = make_batch(Rng(20).derive("b"))
    probs = predict_proba(head, enc, batch)
    z = enc.encode(batch).z
    logits, _ = head_forward(head, z, train=False)
    assert np.array_equal(probs, numerics.softmax(logits))
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6


def test_class_weights_are_w2_columns():
    head = head_for(6, k=4)
    for k in range(4):
        assert np.array_equal(head.class_weights[:, k], head.w2[:, k])


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    head = head_for(5, k=3, hidden=7, seed=8)
    enc = build_encoder(EncoderSpec("identity", channels=1, samples=5))
    ckpt = Checkpoint(head=head, encoder_fingerprint=enc.fingerprint(),
                      provenance={"selected_epoch": 4, "seed": 8})
    path = save_checkpoint(tmp_path / "model.ckpt", ckpt)
    loaded = load_checkpoint(path)
    for name in ("ln_gamma", "ln_beta", "w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(loaded.head, name), getattr(head, name))
    assert loaded.head.dropout_rate == pytest.approx(head.dropout_rate)
    assert loaded.encoder_fingerprint == enc.fingerprint()
    assert loaded.provenance["selected_epoch"] == 4
    assert loaded.content_hash() == ckpt.content_hash()


def test_checkpoint_truncation_detected(tmp_path):
    from neuroadapt.errors import DatasetIOError
    head = head_for(5, k=3)
    enc = build_encoder(EncoderSpec("identity", channels=1, samples=5))
    path = save_checkpoint(tmp_path / "model.ckpt",
                           Checkpoint(head, enc.fingerprint()))
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(DatasetIOError, match="bytes"):
        load_checkpoint(path)
