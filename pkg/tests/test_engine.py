"""Engine checks: forward values, finite-difference gradients, curvature,
noise averaging, evaluation, checkpoints, determinism."""

import hashlib
import json
import math

import numpy as np
import pytest

from bitguard.engine import (
    Batch,
    Dense,
    NoiseSpec,
    QuantizedModel,
    QuantizedTensor,
    backward,
    curvature_diag,
    evaluate,
    forward,
    load_model,
    loss_and_grads,
    loss_with_weights,
    quantize_array,
    save_model,
)
from bitguard.errors import InputError, NumericError

from conftest import dense_model, random_batch, toy_cnn_model


def batch_for(model_classes, n, feat, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, feat))
    y = labels if labels is not None else rng.integers(0, model_classes, size=n)
    return Batch(x, y)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_zero_weights_give_uniform_loss():
    # all-zero weights make logits zero, so cross-entropy is ln(classes)
    model = dense_model(np.zeros((5, 7), dtype=np.int64))
    batch = batch_for(5, 16, 7)
    logits, loss = forward(model, batch)
    assert np.all(logits == 0)
    assert loss == pytest.approx(math.log(5), rel=1e-12)


def test_single_weight_logit():
    model = dense_model([[2]], scale=1.5)
    batch = Batch(np.array([[1.0]]), np.array([0]))
    logits, _ = forward(model, batch)
    assert logits[0, 0] == pytest.approx(3.0, abs=0)


def test_quantize_dequantize_identity_on_grid():
    t = quantize_array(np.linspace(-1, 1, 37), 6)
    again = quantize_array(t.dequantized(), 6, scale=t.scale)
    assert np.array_equal(t.codes, again.codes)


def test_forward_rejects_empty_batch():
    model = dense_model(np.zeros((3, 4), dtype=np.int64))
    with pytest.raises(InputError):
        forward(model, Batch(np.zeros((0, 4)), np.zeros(0, dtype=np.int64)))


def test_nonfinite_activation_names_layer():
    model = dense_model(np.full((3, 4), 7, dtype=np.int64), scale=1e308)
    batch = batch_for(3, 2, 4)
    with pytest.raises(NumericError) as err:
        forward(model, batch)
    assert err.value.layer is not None


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def fd_gradient(model, batch, eps=1e-3):
    """Central finite differences over every weight of every layer."""
    base = [l.weight.dequantized() for _, l in model.parametric()]
    grads = []
    for li, w in enumerate(base):
        g = np.zeros_like(w)
        flat = w.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = loss_with_weights(model, batch, base)
            flat[i] = keep - eps
            lo = loss_with_weights(model, batch, base)
            flat[i] = keep
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def test_gradients_match_finite_differences_all_layer_kinds():
    model = toy_cnn_model(bits=6, seed=3)
    batch = random_batch(8, 1, 4, 3, seed=5)
    grads = backward(model, batch)
    fd = fd_gradient(model, batch)
    for g, f in zip(grads, fd):
        denom = np.maximum(np.abs(f), 1e-3)
        assert np.max(np.abs(g - f) / denom) < 1e-4


def test_gradients_match_finite_differences_dense_sse():
    model = dense_model([[3, -2], [1, 4]], scale=0.25, head="sse")
    batch = Batch(np.array([[0.5, -1.0], [1.5, 0.25]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    grads = backward(model, batch)
    fd = fd_gradient(model, batch)
    assert np.max(np.abs(grads[0] - fd[0])) < 1e-8


def test_loss_and_grads_reports_consistent_loss():
    model = toy_cnn_model(seed=2)
    batch = random_batch(8, 1, 6, 3, seed=2)
    loss, grads = loss_and_grads(model, batch)
    _, loss2 = forward(model, batch)
    assert loss == pytest.approx(loss2, rel=1e-12)
    assert len(grads) == len(model.parametric())


def test_noise_averaging_reduces_gradient_variance():
    model = toy_cnn_model(seed=7)
    batch = random_batch(8, 1, 8, 3, seed=11)
    clean = backward(model, batch)[0]

    def spread(samples, seeds):
        noise = NoiseSpec(std=0.05, samples=samples)
        grads = np.stack(
            [backward(model, batch, noise=noise, seed=s)[0] for s in seeds]
        )
        return float(np.mean(np.var(grads, axis=0)))

    seeds = range(100, 120)
    assert clean.shape == backward(model, batch)[0].shape
    assert spread(4, seeds) < 0.5 * spread(1, seeds)


def test_backward_deterministic_given_seed():
    model = toy_cnn_model(seed=1)
    batch = random_batch(8, 1, 6, 3, seed=1)
    noise = NoiseSpec(std=0.02, samples=2)
    a = backward(model, batch, noise=noise, seed=42)
    b = backward(model, batch, noise=noise, seed=42)
    c = backward(model, batch, noise=noise, seed=43)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------


def test_curvature_quadratic_is_exact():
    # loss = 0.5 * (w - 1)^2 at w = 0: squared per-sample gradient is 1
    model = dense_model([[0]], scale=1.0, head="sse")
    batch = Batch(np.array([[1.0]]), np.array([[1.0]]))
    h = curvature_diag(model, batch)
    assert h[0][0, 0] == pytest.approx(1.0, abs=0)


def test_curvature_zero_at_perfect_fit():
    model = dense_model([[1]], scale=1.0, head="sse")
    batch = Batch(np.array([[2.0]]), np.array([[2.0]]))
    h = curvature_diag(model, batch)
    assert h[0][0, 0] == 0.0


def test_curvature_nonnegative_and_chunking_invariant():
    model = toy_cnn_model(seed=9)
    batch = random_batch(8, 1, 50, 3, seed=9)
    h_small = curvature_diag(model, batch, chunk=7)
    h_big = curvature_diag(model, batch, chunk=64)
    for a, b in zip(h_small, h_big):
        assert np.all(a >= 0)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_evaluate_perfect_and_chance():
    # identity-selector weights classify one-hot inputs perfectly
    model = dense_model(np.eye(4, dtype=np.int64) * 3, scale=1.0)
    x = np.eye(4)
    assert evaluate(model, Batch(x, np.arange(4))) == 1.0
    assert evaluate(model, Batch(x, (np.arange(4) + 1) % 4)) == 0.0


def test_evaluate_rejects_empty_and_sse():
    model = dense_model(np.zeros((3, 4), dtype=np.int64))
    with pytest.raises(InputError):
        evaluate(model, Batch(np.zeros((0, 4)), np.zeros(0, dtype=np.int64)))
    sse = dense_model(np.zeros((3, 4), dtype=np.int64), head="sse")
    with pytest.raises(InputError):
        evaluate(sse, batch_for(3, 4, 4))


def test_evaluate_deterministic_under_noise():
    model = toy_cnn_model(seed=4)
    data = random_batch(8, 1, 40, 3, seed=21)
    noise = NoiseSpec(std=0.05)
    assert evaluate(model, data, noise, seed=5) == evaluate(model, data, noise, seed=5)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = toy_cnn_model(bits=7, seed=13)
    path = tmp_path / "model.json"
    save_model(model, str(path))
    again = load_model(str(path))
    for (_, a), (_, b) in zip(model.parametric(), again.parametric()):
        assert np.array_equal(a.weight.codes, b.weight.codes)
        assert a.weight.scale == b.weight.scale
        assert a.weight.bits == b.weight.bits
    for la, lb in zip(model.layers, again.layers):
        if la.kind == "affine_norm":
            assert np.array_equal(la.scale, lb.scale)
            assert np.array_equal(la.shift, lb.shift)
    path2 = tmp_path / "model2.json"
    save_model(again, str(path2))
    assert file_hash(path) == file_hash(path2)


def test_checkpoint_rejects_garbage(tmp_path):
    from bitguard.errors import FormatError

    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_model(str(path))
    path.write_text(json.dumps({"format_version": 99, "layers": []}))
    with pytest.raises(FormatError):
        load_model(str(path))


def test_clone_is_deep():
    model = toy_cnn_model(seed=6)
    dup = model.clone()
    dup.layers[0].weight.codes[0, 0, 0, 0] += 1
    assert model.layers[0].weight.codes[0, 0, 0, 0] != dup.layers[0].weight.codes[0, 0, 0, 0]


def test_affine_params_never_change_under_engine_calls():
    model = toy_cnn_model(seed=8)
    affine = next(l for l in model.layers if l.kind == "affine_norm")
    before = (affine.scale.copy(), affine.shift.copy())
    batch = random_batch(8, 1, 12, 3, seed=3)
    forward(model, batch)
    backward(model, batch, noise=NoiseSpec(std=0.01, samples=2), seed=1)
    curvature_diag(model, batch)
    evaluate(model, batch)
    assert np.array_equal(affine.scale, before[0])
    assert np.array_equal(affine.shift, before[1])
