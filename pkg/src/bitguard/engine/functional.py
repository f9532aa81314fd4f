"""Inference, gradients, curvature, and accuracy for QuantizedModel.

All entry points are pure with respect to the model: they read weight codes
and never write them.  Randomness (weight noise) is driven entirely by the
seed argument, so identical calls return identical results.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import InputError, NumericError
from . import ops
from .layers import Batch, NoiseSpec, QuantizedModel


def _layer_peak(layer) -> float:
    codes = layer.weight.codes
    if codes.size == 0:
        return 0.0
    return float(np.max(np.abs(codes))) * layer.weight.scale


def _noisy_weights(model: QuantizedModel, noise: Optional[NoiseSpec], rng) -> List[np.ndarray]:
    weights = []
    with np.errstate(over="ignore", invalid="ignore"):
        for _, layer in model.parametric():
            w = layer.weight.dequantized()
            if noise is not None and noise.std > 0:
                w = w + rng.normal(0.0, noise.std * _layer_peak(layer), size=w.shape)
            weights.append(w)
    return weights


def _run_forward(model: QuantizedModel, inputs: np.ndarray, weights: List[np.ndarray]):
    x = inputs
    caches = []
    pidx = 0
    # non-finite values are detected after the pass; keep the pass itself quiet
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_forward_loop(model, x, weights, caches, pidx)


def _run_forward_loop(model, x, weights, caches, pidx):
    for layer in model.layers:
        if layer.kind == "conv2d":
            x_shape = x.shape
            x, cols = ops.conv2d_forward(x, weights[pidx], layer.stride, layer.pad)
            caches.append(("conv2d", (cols, weights[pidx], x_shape, layer.stride, layer.pad)))
            pidx += 1
        elif layer.kind == "dense":
            x_shape = x.shape
            x, flat = ops.dense_forward(x, weights[pidx])
            caches.append(("dense", (flat, weights[pidx], x_shape)))
            pidx += 1
        elif layer.kind == "relu":
            x, pre = ops.relu_forward(x)
            caches.append(("relu", pre))
        elif layer.kind == "maxpool2":
            x, cache = ops.maxpool2_forward(x)
            caches.append(("maxpool2", cache))
        elif layer.kind == "affine_norm":
            caches.append(("affine_norm", layer.scale))
            x = ops.affine_forward(x, layer.scale, layer.shift)
        else:
            raise InputError(f"unknown layer kind {layer.kind!r}")
    return x, caches


def _check_finite(
    model: QuantizedModel,
    logits: np.ndarray,
    loss: float,
    inputs: np.ndarray,
    weights: List[np.ndarray],
) -> None:
    if np.isfinite(loss) and np.all(np.isfinite(logits)):
        return
    # replay layer by layer to name the first offending one
    x = inputs
    pidx = 0
    with np.errstate(over="ignore", invalid="ignore"):
        _locate_nonfinite(model, x, weights, pidx)
    raise NumericError("non-finite loss", layer=model.layers[-1].name)


def _locate_nonfinite(model, x, weights, pidx):
    for layer in model.layers:
        if layer.kind == "conv2d":
            x, _ = ops.conv2d_forward(x, weights[pidx], layer.stride, layer.pad)
            pidx += 1
        elif layer.kind == "dense":
            x, _ = ops.dense_forward(x, weights[pidx])
            pidx += 1
        elif layer.kind == "relu":
            x, _ = ops.relu_forward(x)
        elif layer.kind == "maxpool2":
            x, _ = ops.maxpool2_forward(x)
        else:
            x = ops.affine_forward(x, layer.scale, layer.shift)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite activation", layer=layer.name)
    raise NumericError("non-finite loss", layer=model.layers[-1].name)


def _head_loss(model: QuantizedModel, logits: np.ndarray, labels: np.ndarray):
    if model.head == "xent":
        return ops.xent_loss(logits, np.asarray(labels, dtype=np.int64))
    return ops.sse_loss(logits, labels)


def _backprop(model: QuantizedModel, caches, dlogits: np.ndarray, per_sample: bool):
    grads: List[np.ndarray] = []
    dx = dlogits
    for (kind, cache) in reversed(caches):
        if kind == "conv2d":
            cols, w, x_shape, stride, pad = cache
            if per_sample:
                grads.append(ops.conv2d_grad_per_sample(dx, cols, w.shape))
                d2 = dx.reshape(dx.shape[0], dx.shape[1], -1)
                dcols = np.matmul(w.reshape(w.shape[0], -1).T, d2)
                dx = ops.col2im(dcols, x_shape, w.shape[2], stride, pad)
            else:
                dx, dw = ops.conv2d_backward(dx, cols, w, x_shape, stride, pad)
                grads.append(dw)
        elif kind == "dense":
            flat, w, x_shape = cache
            if per_sample:
                grads.append(ops.dense_grad_per_sample(dx, flat))
                dx = (dx @ w).reshape(x_shape)
            else:
                dx, dw = ops.dense_backward(dx, flat, w, x_shape)
                grads.append(dw)
        elif kind == "relu":
            dx = ops.relu_backward(dx, cache)
        elif kind == "maxpool2":
            dx = ops.maxpool2_backward(dx, cache)
        elif kind == "affine_norm":
            dx = ops.affine_backward(dx, cache)
    grads.reverse()
    return grads


def forward(
    model: QuantizedModel,
    batch: Batch,
    noise: Optional[NoiseSpec] = None,
    seed: int = 0,
) -> Tuple[np.ndarray, float]:
    """Run one inference pass; returns (logits, loss).

    With a nonzero NoiseSpec one Gaussian perturbation is drawn per call and
    shared across the batch.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights = _noisy_weights(model, noise, rng)
    logits, _ = _run_forward(model, batch.inputs, weights)
    loss, _, _ = _head_loss(model, logits, batch.labels)
    _check_finite(model, logits, loss, batch.inputs, weights)
    return logits, loss


def loss_and_grads(
    model: QuantizedModel,
    batch: Batch,
    noise: Optional[NoiseSpec] = None,
    seed: int = 0,
) -> Tuple[float, List[np.ndarray]]:
    """Mean loss and mean-loss weight gradients, averaged over noisy passes.

    Gradients are taken with respect to dequantized weights.  With
    noise.samples > 1 each pass draws fresh noise from a child seed and the
    results are averaged.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    samples = noise.samples if noise is not None else 1
    streams = np.random.SeedSequence(seed).spawn(samples)
    total_loss = 0.0
    grads: List[np.ndarray] = []
    for k in range(samples):
        rng = np.random.default_rng(streams[k])
        weights = _noisy_weights(model, noise, rng)
        logits, caches = _run_forward(model, batch.inputs, weights)
        loss, dlogits, _ = _head_loss(model, logits, batch.labels)
        _check_finite(model, logits, loss, batch.inputs, weights)
        gk = _backprop(model, caches, dlogits, per_sample=False)
        total_loss += loss
        if not grads:
            grads = gk
        else:
            grads = [a + b for a, b in zip(grads, gk)]
    return total_loss / samples, [g / samples for g in grads]


def backward(
    model: QuantizedModel,
    batch: Batch,
    noise: Optional[NoiseSpec] = None,
    seed: int = 0,
) -> List[np.ndarray]:
    """Gradient of the mean loss for each parametric layer, in layer order."""
    _, grads = loss_and_grads(model, batch, noise, seed)
    return grads


def loss_with_weights(model: QuantizedModel, batch: Batch, weights: List[np.ndarray]) -> float:
    """Loss under explicit real-valued weight arrays.

    Diagnostic hook for finite-difference checks and perturbation studies;
    the arrays replace each parametric layer's dequantized weights in order.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    arrays = [np.asarray(w, dtype=np.float64) for w in weights]
    if len(arrays) != len(model.parametric()):
        raise InputError("one weight array per parametric layer is required")
    logits, _ = _run_forward(model, batch.inputs, arrays)
    loss, _, _ = _head_loss(model, logits, batch.labels)
    _check_finite(model, logits, loss, batch.inputs, arrays)
    return loss


def activations(model: QuantizedModel, batch: Batch) -> List[np.ndarray]:
    """Noise-free output of every layer in order, for calibration and debug."""
    if len(batch) == 0:
        raise InputError("empty batch")
    weights = [layer.weight.dequantized() for _, layer in model.parametric()]
    outs: List[np.ndarray] = []
    x = batch.inputs
    pidx = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in model.layers:
            if layer.kind == "conv2d":
                x, _ = ops.conv2d_forward(x, weights[pidx], layer.stride, layer.pad)
                pidx += 1
            elif layer.kind == "dense":
                x, _ = ops.dense_forward(x, weights[pidx])
                pidx += 1
            elif layer.kind == "relu":
                x, _ = ops.relu_forward(x)
            elif layer.kind == "maxpool2":
                x, _ = ops.maxpool2_forward(x)
            elif layer.kind == "affine_norm":
                x = ops.affine_forward(x, layer.scale, layer.shift)
            else:
                raise InputError(f"unknown layer kind {layer.kind!r}")
            outs.append(x)
    return outs


def curvature_diag(model: QuantizedModel, batch: Batch, chunk: int = 64) -> List[np.ndarray]:
    """Diagonal curvature estimate: mean squared per-sample loss gradient.

    Computed noise-free.  Chunked so per-sample gradient tensors never hold
    more than `chunk` samples at once.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    weights = [layer.weight.dequantized() for _, layer in model.parametric()]
    total = [np.zeros_like(w) for w in weights]
    n = len(batch)
    for start in range(0, n, chunk):
        part = Batch(batch.inputs[start : start + chunk], batch.labels[start : start + chunk])
        logits, caches = _run_forward(model, part.inputs, weights)
        loss, _, dper = _head_loss(model, logits, part.labels)
        _check_finite(model, logits, loss, part.inputs, weights)
        per = _backprop(model, caches, dper, per_sample=True)
        for acc, g in zip(total, per):
            acc += (g * g).sum(axis=0)
    return [t / n for t in total]


def evaluate(
    model: QuantizedModel,
    dataset: Batch,
    noise: Optional[NoiseSpec] = None,
    seed: int = 0,
) -> float:
    """Fraction of argmax-correct predictions on the dataset."""
    if model.head != "xent":
        raise InputError("evaluate requires a classification head")
    logits, _ = forward(model, dataset, noise, seed)
    pred = np.argmax(logits, axis=1)
    return float((pred == np.asarray(dataset.labels, dtype=np.int64)).mean())
