"""Weight sensitivity to worst-case single-bit corruption.

A sign-bit flip moves a stored weight by 2^(b-1) quantization levels, the
largest single-flip deviation the storage format allows.  Each weight gets a
second-order Taylor score of the loss change under its own sign-bit flip;
layers are ranked by a dispersion-robust blend of score quantiles, and the
protection budget is assigned to the most exposed layers first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .engine import Batch, QuantizedModel, backward, curvature_diag
from .errors import InputError


@dataclass
class SensitivityMap:
    """Per-weight scores plus the pieces they were built from.

    Arrays are flat, one entry per weight, in parametric layer order.
    """

    scores: List[np.ndarray]  # Taylor loss-change estimate per weight
    grads: List[np.ndarray]  # loss gradient per weight
    curvature: List[np.ndarray]  # diagonal curvature estimate per weight
    msb_delta: List[np.ndarray]  # dequantized deviation of a sign-bit flip
    layer_names: List[str]

    def layer_summary(self) -> List[dict]:
        rows = []
        for i, name in enumerate(self.layer_names):
            s = self.scores[i]
            q50, q75 = np.percentile(s, [50, 75])
            rows.append(
                {
                    "layer": i,
                    "name": name,
                    "weights": int(s.size),
                    "score_mean": float(s.mean()),
                    "score_max": float(s.max()),
                    "score_q50": float(q50),
                    "score_q75": float(q75),
                    "layer_score": float((q50 + q75) / 2),
                }
            )
        return rows

    def to_csv(self, path: str) -> None:
        rows = self.layer_summary()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)


def msb_flip_deltas(model: QuantizedModel) -> List[np.ndarray]:
    """Dequantized weight deviation caused by flipping each weight's sign bit."""
    deltas = []
    for _, layer in model.parametric():
        codes = layer.weight.codes.reshape(-1)
        half = 1 << (layer.weight.bits - 1)
        delta_codes = np.where(codes < 0, half, -half).astype(np.float64)
        deltas.append(delta_codes * layer.weight.scale)
    return deltas


def weight_sensitivity(model: QuantizedModel, val_set: Batch) -> SensitivityMap:
    """Second-order Taylor estimate of the loss change per sign-bit flip.

    score = g * dw + 0.5 * h * dw^2 with g the loss gradient, h the diagonal
    curvature, and dw the sign-bit deviation.  Both g and h are measured on
    the clean model (no injected noise).
    """
    if len(val_set) == 0:
        raise InputError("empty validation set")
    grads = backward(model, val_set)
    curv = curvature_diag(model, val_set)
    deltas = msb_flip_deltas(model)
    scores, flat_g, flat_h = [], [], []
    for g, h, dw in zip(grads, curv, deltas):
        gf = g.reshape(-1)
        hf = h.reshape(-1)
        scores.append(gf * dw + 0.5 * hf * dw * dw)
        flat_g.append(gf)
        flat_h.append(hf)
    names = [layer.name for _, layer in model.parametric()]
    return SensitivityMap(scores, flat_g, flat_h, deltas, names)


def layer_sensitivity(smap: SensitivityMap) -> np.ndarray:
    """Blend of the median and upper-quartile score per layer.

    The blend tracks how much of a layer's mass sits in its sensitive tail
    without letting a single outlier weight dominate the ranking.
    """
    out = np.empty(len(smap.scores), dtype=np.float64)
    for i, s in enumerate(smap.scores):
        q50, q75 = np.percentile(s, [50, 75])
        out[i] = (q50 + q75) / 2
    return out


def _budget_total(rate: float, sizes: np.ndarray) -> int:
    if rate < 0 or rate > 1 or not np.isfinite(rate):
        raise InputError(f"protection rate must lie in [0, 1], got {rate}")
    return int(np.ceil(rate * int(sizes.sum())))


def assign_budget(rate: float, layer_scores: Sequence[float], layer_sizes: Sequence[int]) -> np.ndarray:
    """Fill the most sensitive layers first until the budget is spent.

    The total budget is ceil(rate * total weights).  Layers are visited in
    descending score order (ties broken toward earlier layers) and each
    takes min(remaining, layer size).
    """
    scores = np.asarray(layer_scores, dtype=np.float64)
    sizes = np.asarray(layer_sizes, dtype=np.int64)
    if scores.shape != sizes.shape:
        raise InputError("layer score and size arrays must align")
    remaining = _budget_total(rate, sizes)
    budgets = np.zeros_like(sizes)
    order = sorted(range(sizes.size), key=lambda i: (-scores[i], i))
    for i in order:
        take = min(remaining, int(sizes[i]))
        budgets[i] = take
        remaining -= take
        if remaining == 0:
            break
    return budgets


def even_assign_budget(rate: float, layer_sizes: Sequence[int]) -> np.ndarray:
    """Spread the budget equally across layers, capping at layer size.

    Whatever a small layer cannot absorb is redistributed; when the split
    is uneven the extra units go to the largest layers first.
    """
    sizes = np.asarray(layer_sizes, dtype=np.int64)
    remaining = _budget_total(rate, sizes)
    budgets = np.zeros_like(sizes)
    while remaining > 0:
        active = [i for i in range(sizes.size) if budgets[i] < sizes[i]]
        if not active:
            break
        share, extra = divmod(remaining, len(active))
        order = sorted(active, key=lambda i: (-sizes[i], i))
        gave = 0
        for rank, i in enumerate(order):
            want = share + (1 if rank < extra else 0)
            add = min(want, int(sizes[i] - budgets[i]))
            budgets[i] += add
            gave += add
        if gave == 0:
            break
        remaining -= gave
    return budgets
