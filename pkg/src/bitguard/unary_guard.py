"""Stochastic search for which weights to move into flip-tolerant storage.

Components:
  * UnaryPlan: chosen per-layer index sets plus emulated-attack accuracy.
  * apply_protection: value-preserving BCD-to-TCU re-encoding of a plan.
  * search_protection: sensitivity-weighted trial sampling, scored by the
    worst validation accuracy over repeated attack emulations.

The search treats layers independently (each trial protects one layer and
attacks the model), then re-emulates the union of the per-layer winners to
report cross-layer numbers.
"""

import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .attacker import AttackBudget, bfa_attack
from .bitcodec import tcu_encode
from .engine import Batch, NoiseSpec, evaluate
from .errors import InputError, PlanError
from .sensitivity import (
    assign_budget,
    even_assign_budget,
    layer_sensitivity,
    weight_sensitivity,
)


@dataclass
class UnaryPlan:
    """Protection index sets for one model, with search diagnostics."""

    alpha: float
    layers: Dict[int, List[int]] = field(default_factory=dict)
    worst_acc: Optional[float] = None  # union plan, min over emulations
    mean_acc: Optional[float] = None
    layer_worst: Dict[int, float] = field(default_factory=dict)  # winning trial per layer
    trial_log: Dict[int, List[float]] = field(default_factory=dict)  # worst acc per trial

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.layers.values())

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "layers": [
                {"layer": p, "indices": list(map(int, idx))}
                for p, idx in sorted(self.layers.items())
            ],
            "worst_acc": self.worst_acc,
            "mean_acc": self.mean_acc,
            "layer_worst": {str(p): v for p, v in sorted(self.layer_worst.items())},
            "trial_log": {str(p): v for p, v in sorted(self.trial_log.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "UnaryPlan":
        plan = cls(alpha=float(data["alpha"]))
        plan.layers = {
            int(e["layer"]): [int(i) for i in e["indices"]] for e in data["layers"]
        }
        plan.worst_acc = data.get("worst_acc")
        plan.mean_acc = data.get("mean_acc")
        plan.layer_worst = {int(k): v for k, v in data.get("layer_worst", {}).items()}
        plan.trial_log = {int(k): v for k, v in data.get("trial_log", {}).items()}
        return plan


def apply_protection(model, plan: UnaryPlan):
    """Re-encode the planned weights as TCU words on a copy of the model.

    Dequantized values are untouched; only the storage format (and with it
    the attacker's per-flip damage) changes.
    """
    out = model.clone()
    layers = dict(out.parametric())
    for pidx, indices in plan.layers.items():
        if pidx not in layers:
            raise PlanError(f"plan references unknown layer {pidx}")
        layer = layers[pidx]
        flat = layer.weight.codes.reshape(-1)
        seen = out.protected.setdefault(pidx, {})
        for idx in indices:
            idx = int(idx)
            if not 0 <= idx < flat.size:
                raise PlanError(f"index {idx} out of range for layer {pidx}")
            if idx in seen:
                raise PlanError(f"weight {idx} of layer {pidx} protected twice")
            seen[idx] = tcu_encode(int(flat[idx]), layer.weight.bits)
    return out


def _sample_indices(scores: np.ndarray, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Weighted sample without replacement, softmax over standardized scores."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    spread = s.std()
    z = (s - s.mean()) / spread if spread > 0 else np.zeros_like(s)
    z -= z.max()  # stabilize exp
    p = np.exp(z)
    p /= p.sum()
    return np.sort(rng.choice(s.size, size=count, replace=False, p=p))


def draw_attack_batch(pool: Batch, size: int, rng: np.random.Generator) -> Batch:
    """Sample an attack set of the requested size from a data pool."""
    if len(pool) < size:
        raise InputError(f"attack pool holds {len(pool)} samples, need {size}")
    return pool.take(rng.choice(len(pool), size=size, replace=False))


def _emulate(model, plan: UnaryPlan, budget: AttackBudget, noise,
             val_set: Batch, pool: Batch, emulations: int,
             seq: np.random.SeedSequence) -> List[float]:
    """Accuracy after each of `emulations` independent attacks on the plan."""
    protected = apply_protection(model, plan)
    accs = []
    for child in seq.spawn(emulations):
        rng = np.random.default_rng(child)
        attack_set = draw_attack_batch(pool, budget.batch_size, rng)
        attack_seed = int(rng.integers(0, 2**31 - 1))
        attacked, _ = bfa_attack(protected, attack_set, budget,
                                 noise=noise, seed=attack_seed)
        accs.append(evaluate(attacked, val_set))
    return accs


def search_protection(model, alpha: float, trials: int, emulations: int,
                      budget: AttackBudget, val_set: Batch,
                      seed: int = 0, noise: Optional[NoiseSpec] = None,
                      attack_pool: Optional[Batch] = None,
                      assignment: str = "top",
                      time_cap_s: Optional[float] = None) -> UnaryPlan:
    """Pick protection indices that maximize worst-case post-attack accuracy.

    Per budgeted layer: `trials` candidate index sets are sampled with
    probability softmax(standardized sensitivity), each scored by the worst
    validation accuracy over `emulations` independent attack emulations; the
    best worst-case wins.  The union of per-layer winners is re-emulated for
    the reported plan-level numbers.
    """
    if not 0 < alpha <= 1:
        raise InputError("protection rate must lie in (0, 1]")
    if trials < 1 or emulations < 1:
        raise InputError("trials and emulations must be >= 1")
    if assignment not in ("top", "even"):
        raise InputError(f"unknown assignment mode {assignment!r}")
    budget.validate()
    pool = val_set if attack_pool is None else attack_pool

    smap = weight_sensitivity(model, val_set)
    sizes = model.layer_sizes()
    if assignment == "top":
        budgets = assign_budget(alpha, layer_sensitivity(smap), sizes)
    else:
        budgets = even_assign_budget(alpha, sizes)

    root = np.random.SeedSequence(seed)
    layer_seqs = root.spawn(len(sizes) + 1)
    started = time.monotonic()
    capped = False

    plan = UnaryPlan(alpha=alpha)
    for pidx, layer in model.parametric():
        count = int(budgets[pidx])
        if count == 0:
            continue
        scores = smap.scores[pidx].reshape(-1)
        trial_seqs = layer_seqs[pidx].spawn(trials)
        best_idx: Optional[np.ndarray] = None
        best_worst = -np.inf
        log: List[float] = []
        for t in range(trials):
            if time_cap_s is not None and t > 0 and time.monotonic() - started > time_cap_s:
                capped = True
                break
            rng = np.random.default_rng(trial_seqs[t])
            indices = _sample_indices(scores, count, rng)
            candidate = UnaryPlan(alpha=alpha, layers={pidx: indices.tolist()})
            accs = _emulate(model, candidate, budget, noise, val_set, pool,
                            emulations, trial_seqs[t].spawn(1)[0])
            worst = min(accs)
            log.append(worst)
            if worst > best_worst:
                best_worst, best_idx = worst, indices
        plan.layers[pidx] = best_idx.tolist()
        plan.layer_worst[pidx] = best_worst
        plan.trial_log[pidx] = log

    if capped:
        done = {p: len(v) for p, v in plan.trial_log.items()}
        warnings.warn(f"protection search hit the time cap; trials completed: {done}")

    union_accs = _emulate(model, plan, budget, noise, val_set, pool,
                          emulations, layer_seqs[-1])
    plan.worst_acc = float(min(union_accs))
    plan.mean_acc = float(np.mean(union_accs))
    return plan
