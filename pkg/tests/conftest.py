"""Shared fixtures and small model builders for the test suite."""

import numpy as np
import pytest

from bitguard.engine import (
    AffineNorm,
    Batch,
    Conv2d,
    Dense,
    MaxPool2,
    QuantizedModel,
    QuantizedTensor,
    ReLU,
)


def dense_model(codes, scale=0.1, bits=4, head="xent"):
    """Single dense layer model from explicit integer codes."""
    w = QuantizedTensor(np.asarray(codes, dtype=np.int64), scale, bits)
    return QuantizedModel([Dense(w)], head=head)


def chain_dense_model(sizes, bits=4, scale=0.05, seed=0, head="xent"):
    """Stack of dense layers with the given (out, in) shapes, random codes."""
    rng = np.random.default_rng(seed)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    layers = []
    for out_dim, in_dim in sizes:
        codes = rng.integers(lo, hi + 1, size=(out_dim, in_dim), dtype=np.int64)
        layers.append(Dense(QuantizedTensor(codes, scale, bits)))
    return QuantizedModel(layers, head=head)


def toy_cnn_model(bits=6, seed=0, channels=(1, 3, 4), hw=8, classes=3):
    """Small conv/pool/affine/dense stack covering every layer kind."""
    rng = np.random.default_rng(seed)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1

    def tensor(shape, scale):
        return QuantizedTensor(rng.integers(lo, hi + 1, size=shape, dtype=np.int64), scale, bits)

    c_in, c_mid, c_out = channels
    feat = c_out * (hw // 2) * (hw // 2)
    layers = [
        Conv2d(tensor((c_mid, c_in, 3, 3), 0.05), stride=1, pad=1),
        AffineNorm(1.0 + 0.1 * rng.standard_normal(c_mid), 0.05 * rng.standard_normal(c_mid)),
        ReLU(),
        Conv2d(tensor((c_out, c_mid, 3, 3), 0.04), stride=1, pad=1),
        ReLU(),
        MaxPool2(),
        Dense(tensor((classes, feat), 0.03)),
    ]
    return QuantizedModel(layers)


def random_batch(model_hw, channels, n, classes, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, channels, model_hw, model_hw))
    x = np.rint(x * 32) / 32  # emulate an 8-bit input grid
    y = rng.integers(0, classes, size=n)
    return Batch(x, y)


def crude_fit(model, batch, steps=150, lr=0.05):
    """Minimal quantization-aware fit for test fixtures.

    Float shadow weights take straight-through gradient steps; codes are
    refreshed from the shadows each step with the scales kept fixed.
    """
    from bitguard.bitcodec import code_range
    from bitguard.engine import backward

    shadows = [l.weight.dequantized() for _, l in model.parametric()]
    for _ in range(steps):
        grads = backward(model, batch)
        for w, g in zip(shadows, grads):
            w -= lr * g
        for (_, layer), w in zip(model.parametric(), shadows):
            lo, hi = code_range(layer.weight.bits)
            codes = np.clip(np.rint(w / layer.weight.scale), lo, hi)
            layer.weight.codes[...] = codes.astype(np.int64)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
