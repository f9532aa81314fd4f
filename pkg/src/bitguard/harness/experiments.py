"""Experiment orchestration: a staged pipeline fanned out over seeds.

Stages form a prefix chain (train, attack, protect, lock, plan, eval,
report); requesting a stage runs everything up to and including it.  Each
seed is an isolated job with its own seed stream, so results are identical
whether the grid runs serially or on a worker pool.  Wall-clock timings
are collected separately from report rows: reports must be byte-identical
across reruns.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..attacker import AttackBudget, bfa_attack
from ..engine import NoiseSpec, evaluate, save_model
from ..errors import ConfigError
from ..planner import build_defense, end_to_end_eval, synergy_search
from ..unary_guard import draw_attack_batch
from .config import ExperimentConfig, _build
from .datasets import DatasetSplits, make_dataset
from .pretrain import build_desk_model, pretrain

STAGES = ("train", "attack", "protect", "lock", "plan", "eval", "report")


@dataclass
class ExperimentReport:
    """Rows and aggregates for one experiment run.

    Every row carries the config hash and its seed, so any number is
    traceable back to the exact configuration that produced it.  Timings
    live outside the serialized form.
    """

    config_hash: str
    config: dict
    rows: List[dict]
    aggregates: Dict[str, object]
    timings: Dict[str, float] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "rows": self.rows,
            "aggregates": self.aggregates,
        }


def _stage_rank(stage: str) -> int:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}, expected one of {STAGES}")
    return STAGES.index(stage)


def _noise(std: float, samples: int) -> Optional[NoiseSpec]:
    return NoiseSpec(std=std, samples=samples) if std > 0 else None


def _splits_for(cfg: ExperimentConfig) -> DatasetSplits:
    ds, m = cfg.dataset, cfg.model
    return make_dataset(kind=ds.kind, classes=m.classes, hw=m.hw,
                        train=ds.train, val=ds.val, test=ds.test,
                        attack=ds.attack, noise=ds.noise, seed=ds.seed,
                        idx_images=ds.idx_images, idx_labels=ds.idx_labels)


def _primary_budgets(cfg: ExperimentConfig) -> List[AttackBudget]:
    att = cfg.attacker
    return [AttackBudget(att.max_flips, t, att.batch_size, att.grad_samples)
            for t in att.inference_units]


def _tag(rows: List[dict], stage: str, seed: int, method: str,
         alpha: Optional[float], eta: Optional[float],
         memory: Dict[str, float]) -> List[dict]:
    """Stamp shared identity and ledger fields onto evaluation rows."""
    out = []
    for r in rows:
        out.append({
            "stage": stage,
            "seed": seed,
            "method": method,
            "alpha": alpha,
            "eta": eta,
            "m_tcu": memory.get("m_tcu", 0.0),
            "m_lock": memory.get("m_lock", 0.0),
            "m_total": memory.get("total", 0.0),
            **r,
        })
    return out


def _seed_job(cfg_dict: dict, seed: int, stage: str,
              checkpoint_dir: Optional[str]) -> Tuple[List[dict], Dict[str, float]]:
    """Full pipeline for one seed; top level so a process pool can run it."""
    cfg = _build(cfg_dict)
    rank = _stage_rank(stage)
    rows: List[dict] = []
    timings: Dict[str, float] = {}
    att, dfn = cfg.attacker, cfg.defense
    noise = _noise(att.noise_std, att.grad_samples)

    t0 = time.perf_counter()
    splits = _splits_for(cfg)
    model = build_desk_model(bits=cfg.model.bits, hw=cfg.model.hw,
                             classes=cfg.model.classes, seed=seed)
    history = pretrain(model, splits, epochs=cfg.model.epochs,
                       batch_size=cfg.model.batch_size, lr=cfg.model.lr,
                       seed=seed, floor=cfg.model.floor)
    clean_acc = evaluate(model, splits.val)
    rows.append({
        "stage": "train", "seed": seed, "method": "pretrain",
        "clean_acc": clean_acc, "epochs_ran": len(history.epochs),
        "reached_floor": history.reached_floor,
    })
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir)
        path.mkdir(parents=True, exist_ok=True)
        save_model(model, str(path / f"seed{seed}.json"))
    timings["train"] = time.perf_counter() - t0

    if rank >= _stage_rank("attack"):
        t0 = time.perf_counter()
        bs_grid = att.batch_grid or [att.batch_size]
        for b_idx, bs in enumerate(bs_grid):
            for t_idx, units in enumerate(att.inference_units):
                budget = AttackBudget(att.max_flips, units, bs, att.grad_samples)
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, 0xA77ACC, b_idx, t_idx]))
                attack_set = draw_attack_batch(splits.attack, bs, rng)
                attack_seed = int(rng.integers(0, 2**31 - 1))
                attacked, trace = bfa_attack(model, attack_set, budget,
                                             noise=noise, seed=attack_seed)
                rows.append({
                    "stage": "attack", "seed": seed, "method": "undefended",
                    "batch_size": bs, "inference_units": units,
                    "clean_acc": clean_acc,
                    "post_attack_acc": evaluate(attacked, splits.val),
                    "flips_used": len(trace.flips),
                    "fallback_flips": trace.fallback_count,
                })
        timings["attack"] = time.perf_counter() - t0

    budgets = _primary_budgets(cfg)
    if rank >= _stage_rank("protect"):
        t0 = time.perf_counter()
        plan = build_defense(model, dfn.alpha_grid[0], np.inf, budgets,
                             splits.val, dfn.trials, dfn.emulations, seed,
                             noise=noise, attack_pool=splits.attack,
                             assignment=dfn.assignment)
        rep = end_to_end_eval(model, plan, budgets, dfn.emulations,
                              splits.val, seed=1000 + seed, noise=noise,
                              attack_pool=splits.attack)
        rows += _tag(rep.rows, "protect", seed, "tcu",
                     dfn.alpha_grid[0], None, rep.memory)
        timings["protect"] = time.perf_counter() - t0

    if rank >= _stage_rank("lock"):
        t0 = time.perf_counter()
        plan = build_defense(model, 0.0, dfn.eta_grid[0], budgets,
                             splits.val, dfn.trials, dfn.emulations, seed,
                             noise=noise, attack_pool=splits.attack,
                             assignment=dfn.assignment)
        rep = end_to_end_eval(model, plan, budgets, dfn.emulations,
                              splits.val, seed=1000 + seed, noise=noise,
                              attack_pool=splits.attack)
        rows += _tag(rep.rows, "lock", seed, "lock",
                     0.0, dfn.eta_grid[0], rep.memory)
        timings["lock"] = time.perf_counter() - t0

    chosen = None
    if rank >= _stage_rank("plan"):
        t0 = time.perf_counter()
        chosen, log = synergy_search(model, budgets, splits.val,
                                     alpha_grid=dfn.alpha_grid,
                                     eta_grid=dfn.eta_grid,
                                     trials=dfn.trials,
                                     emulations=dfn.emulations, seed=seed,
                                     noise=noise, attack_pool=splits.attack,
                                     target_drop=dfn.target_drop,
                                     assignment=dfn.assignment)
        chosen_eta = chosen.eta if np.isfinite(chosen.eta) else None
        for entry in log:
            rows.append({
                "stage": "plan", "seed": seed, "method": "synergy_search",
                **entry,
                "chosen": entry["alpha"] == chosen.alpha
                and entry["eta"] == chosen_eta,
            })
        timings["plan"] = time.perf_counter() - t0

    if rank >= _stage_rank("eval"):
        t0 = time.perf_counter()
        rep = end_to_end_eval(model, chosen, budgets, dfn.emulations,
                              splits.val, seed=1000 + seed, noise=noise,
                              attack_pool=splits.attack)
        rows += _tag(rep.rows, "eval", seed, "synergy",
                     chosen.alpha, chosen_eta, rep.memory)
        timings["eval"] = time.perf_counter() - t0

    return rows, timings


def _aggregate(rows: List[dict]) -> Dict[str, object]:
    """Cross-seed summary tables and plot-ready accuracy series."""
    agg: Dict[str, object] = {}

    def mean_over(stage: str, key: str, group: Tuple[str, ...]) -> List[dict]:
        cells: Dict[tuple, list] = {}
        for r in rows:
            if r["stage"] == stage and r.get(key) is not None:
                cells.setdefault(tuple(r[g] for g in group), []).append(r[key])
        return [
            {**dict(zip(group, k)), f"{key}_mean": float(np.mean(v))}
            for k, v in sorted(cells.items())
        ]

    grid = mean_over("attack", "post_attack_acc", ("batch_size", "inference_units"))
    if grid:
        agg["post_attack_grid"] = grid

    series: Dict[str, dict] = {}
    undefended = mean_over("attack", "post_attack_acc", ("inference_units",))
    if undefended:
        series["undefended_post_attack"] = {
            "x": [c["inference_units"] for c in undefended],
            "y": [c["post_attack_acc_mean"] for c in undefended],
        }
    for stage, key in (("protect", "resumed_acc"), ("lock", "resumed_acc"),
                       ("eval", "resumed_acc")):
        cells = mean_over(stage, key, ("inference_units",))
        if cells:
            series[f"{stage}_resumed"] = {
                "x": [c["inference_units"] for c in cells],
                "y": [c[f"{key}_mean"] for c in cells],
            }
    if series:
        agg["accuracy_vs_budget"] = series

    eval_rows = [r for r in rows if r["stage"] == "eval"]
    if eval_rows:
        resumed = np.array([r["resumed_acc"] for r in eval_rows])
        agg["eval_summary"] = {
            "clean_acc_mean": float(np.mean([r["clean_acc"] for r in eval_rows])),
            "resumed_mean": float(resumed.mean()),
            "resumed_worst": float(resumed.min()),
            "post_attack_mean": float(np.mean(
                [r["post_attack_acc"] for r in eval_rows])),
            "m_total_mean": float(np.mean([r["m_total"] for r in eval_rows])),
        }

    noise_rows = [r for r in rows if r["stage"] == "noise"]
    if noise_rows:
        agg["noise_grid"] = mean_over(
            "noise", "post_attack_acc", ("noise_std", "grad_samples"))
    return agg


def run_experiment(config: ExperimentConfig, stage: str = "report",
                   jobs: int = 1, write: Optional[bool] = None,
                   out_dir: Optional[str] = None) -> ExperimentReport:
    """Execute the pipeline through `stage` for every configured seed.

    jobs > 1 fans seeds out over a process pool; the merge is ordered by
    the config's seed list, so the report does not depend on scheduling.
    Files are written only when `write` is true (default: only for the
    report stage).
    """
    config.validate()
    _stage_rank(stage)
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if write is None:
        write = stage == "report"
    out = out_dir or config.out_dir
    checkpoint_dir = str(Path(out) / "checkpoints") if write else None
    run_stage = "eval" if stage == "report" else stage

    cfg_dict = config.to_dict()
    per_seed: Dict[int, Tuple[List[dict], Dict[str, float]]] = {}
    if jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(config.seeds))) as pool:
            futures = {
                seed: pool.submit(_seed_job, cfg_dict, seed, run_stage,
                                  checkpoint_dir)
                for seed in config.seeds
            }
            for seed, fut in futures.items():
                per_seed[seed] = fut.result()
    else:
        for seed in config.seeds:
            per_seed[seed] = _seed_job(cfg_dict, seed, run_stage, checkpoint_dir)

    config_hash = config.config_hash()
    rows: List[dict] = []
    timings: Dict[str, float] = {}
    for seed in config.seeds:
        seed_rows, seed_times = per_seed[seed]
        for r in seed_rows:
            rows.append({"config_hash": config_hash, **r})
        for name, secs in seed_times.items():
            timings[f"seed{seed}.{name}"] = secs

    report = ExperimentReport(config_hash, cfg_dict, rows, _aggregate(rows),
                              timings)
    if write:
        from .reports import write_report
        write_report(report, out)
    return report


def _sweep_job(cfg_dict: dict, seed: int, stds: List[float],
               samples_grid: List[int]) -> Tuple[List[dict], Dict[str, float]]:
    """Train once, then attack under every (noise std, averaging) cell."""
    cfg = _build(cfg_dict)
    rows: List[dict] = []
    t0 = time.perf_counter()
    splits = _splits_for(cfg)
    model = build_desk_model(bits=cfg.model.bits, hw=cfg.model.hw,
                             classes=cfg.model.classes, seed=seed)
    pretrain(model, splits, epochs=cfg.model.epochs,
             batch_size=cfg.model.batch_size, lr=cfg.model.lr,
             seed=seed, floor=cfg.model.floor)
    clean_acc = evaluate(model, splits.val)
    att = cfg.attacker

    for s_idx, std in enumerate(stds):
        for n_idx, samples in enumerate(samples_grid):
            noise = _noise(std, samples)
            for t_idx, units in enumerate(att.inference_units):
                budget = AttackBudget(att.max_flips, units,
                                      att.batch_size, samples)
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, 0x5EED, s_idx, n_idx, t_idx]))
                attack_set = draw_attack_batch(splits.attack, att.batch_size, rng)
                attack_seed = int(rng.integers(0, 2**31 - 1))
                attacked, trace = bfa_attack(model, attack_set, budget,
                                             noise=noise, seed=attack_seed)
                rows.append({
                    "stage": "noise", "seed": seed, "method": "undefended",
                    "noise_std": std, "grad_samples": samples,
                    "inference_units": units, "clean_acc": clean_acc,
                    "post_attack_acc": evaluate(attacked, splits.val),
                    "flips_used": len(trace.flips),
                    "fallback_flips": trace.fallback_count,
                })
    return rows, {"sweep": time.perf_counter() - t0}


def run_noise_sweep(config: ExperimentConfig, stds: List[float],
                    samples_grid: List[int], jobs: int = 1) -> ExperimentReport:
    """Mean post-attack accuracy per (noise std, gradient averaging) cell."""
    config.validate()
    if not stds or not samples_grid:
        raise ConfigError("noise sweep grids must be nonempty")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")

    cfg_dict = config.to_dict()
    per_seed: Dict[int, Tuple[List[dict], Dict[str, float]]] = {}
    if jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(config.seeds))) as pool:
            futures = {
                seed: pool.submit(_sweep_job, cfg_dict, seed, stds, samples_grid)
                for seed in config.seeds
            }
            for seed, fut in futures.items():
                per_seed[seed] = fut.result()
    else:
        for seed in config.seeds:
            per_seed[seed] = _sweep_job(cfg_dict, seed, stds, samples_grid)

    config_hash = config.config_hash()
    rows: List[dict] = []
    timings: Dict[str, float] = {}
    for seed in config.seeds:
        seed_rows, seed_times = per_seed[seed]
        for r in seed_rows:
            rows.append({"config_hash": config_hash, **r})
        for name, secs in seed_times.items():
            timings[f"seed{seed}.{name}"] = secs
    return ExperimentReport(config_hash, cfg_dict, rows, _aggregate(rows),
                            timings)
