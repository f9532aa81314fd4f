"""Array primitives for the inference engine: forward and backward rules.

Everything is float64 and allocation-explicit; backward functions take the
caches their forward produced.  Convolution uses im2col so weight gradients
reduce to matrix products, which also gives cheap per-sample gradients.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np


def conv_out_hw(h: int, w: int, k: int, stride: int, pad: int) -> Tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (N, C, H, W) into (N, C*k*k, P) patch columns."""
    n, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c * k * k, oh * ow), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            patch = x[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride]
            # row index c*(k*k) + di*k + dj matches the (O, C, k, k) weight layout
            cols[:, di * k + dj :: k * k, :] = patch.reshape(n, c, oh * ow)
    return cols


def col2im(cols: np.ndarray, x_shape: Tuple[int, ...], k: int, stride: int, pad: int) -> np.ndarray:
    """Fold patch columns back onto the input grid, summing overlaps."""
    n, c, h, w = x_shape
    oh, ow = conv_out_hw(h, w, k, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            patch = cols[:, di * k + dj :: k * k, :].reshape(n, c, oh, ow)
            xp[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += patch
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    n = x.shape[0]
    out_ch, _, k, _ = w.shape
    oh, ow = conv_out_hw(x.shape[2], x.shape[3], k, stride, pad)
    cols = im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(out_ch, -1), cols)
    return out.reshape(n, out_ch, oh, ow), cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int):
    n, out_ch = dout.shape[:2]
    k = w.shape[2]
    d2 = dout.reshape(n, out_ch, -1)
    dw = np.einsum("nop,nkp->ok", d2, cols).reshape(w.shape)
    dcols = np.matmul(w.reshape(out_ch, -1).T, d2)
    dx = col2im(dcols, x_shape, k, stride, pad)
    return dx, dw


def conv2d_grad_per_sample(dout: np.ndarray, cols: np.ndarray, w_shape) -> np.ndarray:
    n, out_ch = dout.shape[:2]
    d2 = dout.reshape(n, out_ch, -1)
    return np.einsum("nop,nkp->nok", d2, cols).reshape((n,) + w_shape)


def dense_forward(x: np.ndarray, w: np.ndarray):
    flat = x.reshape(x.shape[0], -1)
    return flat @ w.T, flat


def dense_backward(dout: np.ndarray, flat: np.ndarray, w: np.ndarray, x_shape):
    dw = dout.T @ flat
    dx = (dout @ w).reshape(x_shape)
    return dx, dw


def dense_grad_per_sample(dout: np.ndarray, flat: np.ndarray) -> np.ndarray:
    return np.einsum("no,nf->nof", dout, flat)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def maxpool2_forward(x: np.ndarray):
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:, :, : h2 * 2, : w2 * 2].reshape(n, c, h2, 2, w2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    amax = np.argmax(win, axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, amax[..., None], axis=-1)[..., 0]
    return out, (amax, x.shape)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    amax, x_shape = cache
    n, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    dwin = np.zeros((n, c, h2, w2, 4), dtype=np.float64)
    np.put_along_axis(dwin, amax[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape, dtype=np.float64)
    dx[:, :, : h2 * 2, : w2 * 2] = dwin.reshape(n, c, h2 * 2, w2 * 2)
    return dx


def affine_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    if x.ndim == 4:
        return x * scale[None, :, None, None] + shift[None, :, None, None]
    return x * scale[None, :] + shift[None, :]


def affine_backward(dout: np.ndarray, scale: np.ndarray) -> np.ndarray:
    if dout.ndim == 4:
        return dout * scale[None, :, None, None]
    return dout * scale[None, :]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def xent_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy; returns (loss, mean-loss dlogits, per-sample dlogits)."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    dper = softmax(logits)
    dper[np.arange(n), labels] -= 1.0
    return loss, dper / n, dper


def sse_loss(logits: np.ndarray, targets: np.ndarray):
    """Mean halved squared error; same return convention as xent_loss."""
    n = logits.shape[0]
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    diff = logits - t
    loss = float(0.5 * (diff * diff).sum(axis=1).mean())
    return loss, diff / n, diff
