"""Defense composition: protect, attack, detect, lock, evaluate, and search.

Components:
  * DefensePlan: one (alpha, eta) configuration with its plans and ledgers.
  * end_to_end_eval: the shared evaluation protocol; every reported number
    in the package flows through this pipeline.
  * synergy_search: greedy descent over the alpha grid crossed with the eta
    grid, stopping when total memory stops improving, constrained by a
    resumed-accuracy target.

Memory totals quote the reported payload mode; the exact as-built mode is
carried alongside in every report.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attacker import AttackBudget, bfa_attack
from .bitcodec import ledger_lock, ledger_tcu
from .engine import Batch, NoiseSpec, evaluate
from .engine.functional import curvature_diag
from .errors import InputError
from .lockdown import (
    DetectionReport,
    LayerLockPlan,
    LockPlan,
    detect,
    lock,
    search_lock_plan,
)
from .unary_guard import UnaryPlan, apply_protection, draw_attack_batch, search_protection

DEFAULT_ALPHA_GRID = (0.02, 0.01, 0.005, 0.0025)
DEFAULT_ETA_GRID = (0.01, 0.015, 0.02)


def empty_unary_plan() -> UnaryPlan:
    return UnaryPlan(alpha=0.0)


def disabled_lock_plan(model) -> LockPlan:
    """Locking switched off: every layer marked unlockable, no signatures."""
    plan = LockPlan(eta=float("inf"))
    plan.layers = {pidx: LayerLockPlan(None, None) for pidx, _ in model.parametric()}
    from .lockdown import compute_signatures

    plan.signatures = compute_signatures(model, plan)
    return plan


@dataclass
class DefensePlan:
    """One protect-plus-lock configuration and its evaluation artifacts."""

    alpha: float
    eta: float  # inf means locking disabled
    unary: UnaryPlan
    lockdown: LockPlan
    memory: Dict[str, float] = field(default_factory=dict)
    accuracy: Dict[str, float] = field(default_factory=dict)
    feasible: bool = True

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "eta": self.eta if np.isfinite(self.eta) else None,
            "unary": self.unary.to_json(),
            "lockdown": self.lockdown.to_json(),
            "memory": self.memory,
            "accuracy": self.accuracy,
            "feasible": self.feasible,
        }


def measure_memory(model, unary: UnaryPlan, lockdown: LockPlan) -> Dict[str, float]:
    """Integer bit ledgers for both plan components plus derived ratios."""
    tcu_rep = ledger_tcu(unary, model, mode="reported")
    tcu_exact = ledger_tcu(unary, model, mode="exact")
    locking = ledger_lock(lockdown, model)
    baseline = tcu_rep.baseline_bits
    return {
        "tcu_bits": tcu_rep.component_bits,
        "tcu_bits_exact": tcu_exact.component_bits,
        "lock_bits": locking.component_bits,
        "baseline_bits": baseline,
        "m_tcu": tcu_rep.component_bits / baseline,
        "m_tcu_exact": tcu_exact.component_bits / baseline,
        "m_lock": locking.component_bits / baseline,
        "total": (tcu_rep.component_bits + locking.component_bits) / baseline,
        "total_exact": (tcu_exact.component_bits + locking.component_bits) / baseline,
    }


def _truth_groups(trace, protected_model, lockdown: LockPlan) -> Dict[int, set]:
    """Groups holding at least one flipped plain-storage weight, per layer."""
    truth: Dict[int, set] = {}
    for flip in trace.flips:
        pidx = flip.address.layer
        lp = lockdown.layers.get(pidx)
        if lp is None or lp.group_size is None:
            continue
        if flip.address.weight in protected_model.protected_in(pidx):
            continue  # flip-tolerant storage, not the checksum's job
        truth.setdefault(pidx, set()).add(flip.address.weight // lp.group_size)
    return truth


def _detection_stats(flagged: Dict[int, np.ndarray], truth: Dict[int, set]) -> Dict[str, float]:
    tp = fp = fn = 0
    for pidx in set(flagged) | set(truth):
        got = set(np.asarray(flagged.get(pidx, np.array([], dtype=np.int64))).tolist())
        want = truth.get(pidx, set())
        tp += len(got & want)
        fp += len(got - want)
        fn += len(want - got)
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    return {"tp": tp, "fp": fp, "fn": fn, "precision": precision, "recall": recall}


def emulate_hit_weights(protected, budgets: List[AttackBudget], emulations: int,
                        val_set: Batch, seed: int = 0,
                        noise: Optional[NoiseSpec] = None,
                        attack_pool: Optional[Batch] = None) -> Dict[int, np.ndarray]:
    """Flat indices of weights flipped in plan-time attack emulations.

    Every budget in the declared threat grid is emulated: inference-starved
    budgets fall back to plain sign-bit sweeps and hit a different weight
    population than fully guided ones.  Drawn on its own seed stream so
    evaluation attacks stay independent.
    """
    pool = val_set if attack_pool is None else attack_pool
    hits: Dict[int, set] = {}
    for b_idx, budget in enumerate(budgets):
        seq = np.random.SeedSequence([seed, 0x57A7C, b_idx])
        for child in seq.spawn(max(1, emulations)):
            rng = np.random.default_rng(child)
            attack_set = draw_attack_batch(pool, budget.batch_size, rng)
            attack_seed = int(rng.integers(0, 2**31 - 1))
            _, trace = bfa_attack(protected, attack_set, budget,
                                  noise=noise, seed=attack_seed)
            for flip in trace.flips:
                hits.setdefault(flip.address.layer, set()).add(flip.address.weight)
    return {p: np.array(sorted(v), dtype=np.int64) for p, v in hits.items()}


def trim_watch_margins(protected, lockdown: LockPlan, val_set: Batch,
                       cap: float) -> None:
    """Shrink watch margins until the joint containment lock costs < cap.

    The per-layer search bounds each layer's footprint damage alone; locking
    several layers' footprints together compounds through depth, so the
    static margins are cut back (largest shared fraction first, emulated
    cores never trimmed) until overwriting every watched group across all
    layers drops validation accuracy by less than cap.
    """
    margins = {
        pidx: lp.watch_margin
        for pidx, lp in lockdown.layers.items()
        if lp.group_size is not None and lp.watch_margin is not None
    }
    if not margins:
        return
    acc0 = evaluate(protected, val_set)

    def joint_drop(fraction: float) -> float:
        flags = {}
        for pidx, lp in lockdown.layers.items():
            if lp.group_size is None:
                continue
            keep = margins.get(pidx, np.empty(0, dtype=np.int64))
            keep = keep[: int(np.ceil(fraction * keep.size))]
            core = lp.watch_core if lp.watch_core is not None else np.empty(0, dtype=np.int64)
            merged = np.unique(np.concatenate([core, keep])).astype(np.int64)
            if merged.size:
                flags[pidx] = merged
        if not flags:
            return 0.0
        return acc0 - evaluate(lock(protected, flags, lockdown), val_set)

    best = 0.0
    if joint_drop(1.0) < cap:
        best = 1.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(6):
            mid = (lo + hi) / 2.0
            if joint_drop(mid) < cap:
                best, lo = mid, mid
            else:
                hi = mid
    for pidx, margin in margins.items():
        lp = lockdown.layers[pidx]
        lp.watch_margin = margin[: int(np.ceil(best * margin.size))]


def contain(model, report: DetectionReport, plan: LockPlan):
    """Containment response: any flag locks flagged plus watched groups.

    A collided group hides from the checksums, so one confirmed flip
    anywhere escalates to the whole pre-validated watch footprint; with no
    flags at all the model is returned untouched (a clone, like lock).
    """
    any_flag = any(v.size for v in report.flagged.values())
    flags: Dict[int, np.ndarray] = {}
    for pidx, lp in plan.layers.items():
        if lp.group_size is None:
            continue
        parts = [np.asarray(report.flagged.get(pidx, np.empty(0, dtype=np.int64)),
                            dtype=np.int64)]
        if any_flag:
            parts.append(lp.watched())
        merged = np.unique(np.concatenate(parts))
        if merged.size:
            flags[pidx] = merged
    return lock(model, flags, plan)


@dataclass
class PipelineReport:
    """Per-run rows plus aggregates from the shared evaluation protocol."""

    rows: List[dict]
    summary: Dict[str, float]
    memory: Dict[str, float]

    def to_json(self) -> dict:
        return {"rows": self.rows, "summary": self.summary, "memory": self.memory}


def end_to_end_eval(model, plan: DefensePlan, budgets: List[AttackBudget],
                    emulations: int, val_set: Batch, seed: int = 0,
                    noise: Optional[NoiseSpec] = None,
                    attack_pool: Optional[Batch] = None) -> PipelineReport:
    """Protect, attack, detect, lock, evaluate over budgets x emulations.

    Detection always compares post-attack weights against the pre-attack
    signatures; recovery applies the containment response (flagged plus
    watched groups); locking never rewrites flip-tolerant weights.
    """
    if emulations < 1:
        raise InputError("emulations must be >= 1")
    pool = val_set if attack_pool is None else attack_pool
    clean_acc = evaluate(model, val_set)
    protected = apply_protection(model, plan.unary)
    table = plan.lockdown.signatures

    rows: List[dict] = []
    budget_seqs = np.random.SeedSequence(seed).spawn(len(budgets))
    for b_idx, budget in enumerate(budgets):
        budget.validate()
        for e_idx, child in enumerate(budget_seqs[b_idx].spawn(emulations)):
            rng = np.random.default_rng(child)
            attack_set = draw_attack_batch(pool, budget.batch_size, rng)
            attack_seed = int(rng.integers(0, 2**31 - 1))
            attacked, trace = bfa_attack(protected, attack_set, budget,
                                         noise=noise, seed=attack_seed)
            post_acc = evaluate(attacked, val_set)

            if table and table.layers:
                report = detect(attacked, table)
            else:
                report = DetectionReport({})
            flagged = report.flagged
            recovered = contain(attacked, report, plan.lockdown)
            resumed_acc = evaluate(recovered, val_set)

            stats = _detection_stats(flagged, _truth_groups(trace, protected, plan.lockdown))
            on_protected = sum(
                1 for f in trace.flips
                if f.address.weight in protected.protected_in(f.address.layer)
            )
            rows.append({
                "budget_index": b_idx,
                "max_flips": budget.max_flips,
                "inference_units": budget.inference_units,
                "emulation": e_idx,
                "clean_acc": clean_acc,
                "post_attack_acc": post_acc,
                "resumed_acc": resumed_acc,
                "fallback_flips": trace.fallback_count,
                "flips_on_protected": on_protected,
                **stats,
            })

    # an empty budget list means nobody attacked: resumed accuracy is clean
    resumed = np.array([r["resumed_acc"] for r in rows] or [clean_acc])
    post = np.array([r["post_attack_acc"] for r in rows] or [clean_acc])
    summary = {
        "clean_acc": clean_acc,
        "resumed_best": float(resumed.max()),
        "resumed_worst": float(resumed.min()),
        "resumed_mean": float(resumed.mean()),
        "post_attack_mean": float(post.mean()),
        "precision_mean": float(np.mean([r["precision"] for r in rows] or [1.0])),
        "recall_mean": float(np.mean([r["recall"] for r in rows] or [1.0])),
    }
    return PipelineReport(rows, summary, measure_memory(model, plan.unary, plan.lockdown))


def build_defense(model, alpha: float, eta: float, budgets: List[AttackBudget],
                  val_set: Batch, trials: int, emulations: int, seed: int,
                  noise: Optional[NoiseSpec] = None,
                  attack_pool: Optional[Batch] = None,
                  assignment: str = "top") -> DefensePlan:
    """Construct the (alpha, eta) plan pair on a clean model."""
    emulation_budget = max(budgets, key=lambda b: (b.max_flips, b.inference_units))
    if alpha > 0:
        unary = search_protection(model, alpha, trials, emulations,
                                  emulation_budget, val_set, seed=seed,
                                  noise=noise, attack_pool=attack_pool,
                                  assignment=assignment)
    else:
        unary = empty_unary_plan()
    protected = apply_protection(model, unary)

    if np.isfinite(eta):
        # Curvature-weighted centroids only: the closed form's gradient
        # offset g/h amplifies sampling noise without bound near convergence
        # and pushes centroids off the representable range.
        h = [x.reshape(-1) for x in curvature_diag(protected, val_set)]
        g = [np.zeros_like(x) for x in h]
        hits = emulate_hit_weights(protected, budgets, emulations,
                                   val_set, seed=seed, noise=noise,
                                   attack_pool=attack_pool)
        lockdown = search_lock_plan(protected, val_set, eta, g, h, seed=seed,
                                    flip_budget=emulation_budget.max_flips,
                                    hit_weights=hits)
        trim_watch_margins(protected, lockdown, val_set, cap=eta)
    else:
        lockdown = disabled_lock_plan(protected)
    return DefensePlan(alpha=alpha, eta=eta, unary=unary, lockdown=lockdown)


def synergy_search(model, budgets: List[AttackBudget], val_set: Batch,
                   alpha_grid=DEFAULT_ALPHA_GRID, eta_grid=DEFAULT_ETA_GRID,
                   trials: int = 3, emulations: int = 2, seed: int = 0,
                   noise: Optional[NoiseSpec] = None,
                   attack_pool: Optional[Batch] = None,
                   target_drop: float = 0.03,
                   assignment: str = "top") -> Tuple[DefensePlan, List[dict]]:
    """Greedy (alpha, eta) sweep minimizing memory under an accuracy floor.

    Alphas are visited in descending order; the descent stops when the best
    total memory seen for an alpha exceeds the previous alpha's best.  Among
    feasible plans (mean resumed accuracy >= clean - target_drop) the
    cheapest wins; if none is feasible the most accurate plan is returned
    flagged infeasible.  The full evaluation log is returned for reporting.
    """
    if not alpha_grid or not eta_grid:
        raise InputError("alpha and eta grids must be nonempty")
    alphas = sorted(alpha_grid, reverse=True)
    clean_acc = evaluate(model, val_set)
    target = clean_acc - target_drop
    emulation_budget = max(budgets, key=lambda b: (b.max_flips, b.inference_units))

    log: List[dict] = []
    evaluated: List[DefensePlan] = []
    prev_best: Optional[float] = None
    for a_idx, alpha in enumerate(alphas):
        # The unary search, the curvature snapshot and the emulated attack
        # footprint depend only on alpha; sharing them across the eta sweep
        # keeps results identical.
        if alpha > 0:
            unary = search_protection(model, alpha, trials, emulations,
                                      emulation_budget, val_set,
                                      seed=seed + a_idx, noise=noise,
                                      attack_pool=attack_pool,
                                      assignment=assignment)
        else:
            unary = empty_unary_plan()
        protected = apply_protection(model, unary)
        h = [x.reshape(-1) for x in curvature_diag(protected, val_set)]
        g = [np.zeros_like(x) for x in h]
        hits = None
        if any(np.isfinite(eta) for eta in eta_grid):
            hits = emulate_hit_weights(protected, budgets, emulations,
                                       val_set, seed=seed + a_idx, noise=noise,
                                       attack_pool=attack_pool)

        alpha_best = np.inf
        for eta in eta_grid:
            if np.isfinite(eta):
                lockdown = search_lock_plan(
                    protected, val_set, eta, g, h, seed=seed + a_idx,
                    flip_budget=emulation_budget.max_flips,
                    hit_weights=hits)
                trim_watch_margins(protected, lockdown, val_set, cap=eta)
            else:
                lockdown = disabled_lock_plan(protected)
            plan = DefensePlan(alpha=alpha, eta=eta, unary=unary,
                               lockdown=lockdown)
            report = end_to_end_eval(model, plan, budgets, emulations,
                                     val_set, seed=seed, noise=noise,
                                     attack_pool=attack_pool)
            plan.memory = report.memory
            plan.accuracy = report.summary
            plan.feasible = report.summary["resumed_mean"] >= target
            evaluated.append(plan)
            alpha_best = min(alpha_best, report.memory["total"])
            log.append({
                "alpha": alpha,
                "eta": eta if np.isfinite(eta) else None,
                "total_memory": report.memory["total"],
                "m_tcu": report.memory["m_tcu"],
                "m_lock": report.memory["m_lock"],
                "resumed_mean": report.summary["resumed_mean"],
                "resumed_worst": report.summary["resumed_worst"],
                "feasible": plan.feasible,
            })
        if prev_best is not None and alpha_best > prev_best:
            break
        prev_best = alpha_best

    feasible = [p for p in evaluated if p.feasible]
    if feasible:
        chosen = min(feasible, key=lambda p: (p.memory["total"], -p.accuracy["resumed_mean"]))
    else:
        chosen = max(evaluated, key=lambda p: (p.accuracy["resumed_mean"], -p.memory["total"]))
        chosen.feasible = False
    return chosen, log


def pareto_front(log: List[dict]) -> List[dict]:
    """Entries not dominated in (total memory, resumed mean accuracy)."""
    front = []
    for row in log:
        dominated = any(
            other["total_memory"] <= row["total_memory"]
            and other["resumed_mean"] >= row["resumed_mean"]
            and (other["total_memory"] < row["total_memory"]
                 or other["resumed_mean"] > row["resumed_mean"])
            for other in log
        )
        if not dominated:
            front.append(row)
    return sorted(front, key=lambda r: r["total_memory"])
