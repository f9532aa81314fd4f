"""Experiment configuration: file loading, environment overrides, hashing."""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from ..errors import ConfigError

ENV_PREFIX = "BITGUARD_"


@dataclass
class ModelConfig:
    bits: int = 8
    hw: int = 12
    classes: int = 10
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-3
    floor: float = 0.90


@dataclass
class DatasetConfig:
    kind: str = "prototype"
    train: int = 2000
    val: int = 500
    test: int = 500
    attack: int = 16
    noise: float = 0.25
    seed: int = 7  # the dataset is the shared benchmark; run seeds vary elsewhere
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None


@dataclass
class AttackerConfig:
    max_flips: int = 100
    inference_units: List[int] = field(default_factory=lambda: [20, 80, 160, 400, 900])
    batch_size: int = 16
    batch_grid: List[int] = field(default_factory=list)  # empty = [batch_size]
    grad_samples: int = 1
    noise_std: float = 0.0


@dataclass
class DefenseConfig:
    alpha_grid: List[float] = field(default_factory=lambda: [0.02, 0.01, 0.005, 0.0025])
    eta_grid: List[float] = field(default_factory=lambda: [0.01, 0.015, 0.02])
    trials: int = 4
    emulations: int = 3
    target_drop: float = 0.03
    assignment: str = "top"


@dataclass
class ExperimentConfig:
    """Full description of one experiment run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attacker: AttackerConfig = field(default_factory=AttackerConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Stable digest of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.defense.alpha_grid or not self.defense.eta_grid:
            raise ConfigError("defense grids must be nonempty")
        if self.attacker.max_flips < 1:
            raise ConfigError("max_flips must be >= 1")
        if not self.attacker.inference_units:
            raise ConfigError("inference_units grid must be nonempty")
        if self.dataset.kind == "idx":
            for label, p in (("idx_images", self.dataset.idx_images),
                             ("idx_labels", self.dataset.idx_labels)):
                if p is None:
                    raise ConfigError(f"idx datasets require {label}")
                if not Path(p).exists():
                    raise ConfigError(f"{label} file not found: {p}")
        return self


_SECTIONS = {
    "model": ModelConfig,
    "dataset": DatasetConfig,
    "attacker": AttackerConfig,
    "defense": DefenseConfig,
}


def _build(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            known = set(cls.__dataclass_fields__)
            bad = set(value) - known
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            kwargs[key] = cls(**value)
        elif key in ("seeds", "out_dir"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return ExperimentConfig(**kwargs)


def _apply_env(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    """Override scalar fields via BITGUARD_<SECTION>_<FIELD> variables."""
    env = os.environ if environ is None else environ
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower()
        if path == "out_dir":
            cfg.out_dir = raw
            continue
        if path == "seeds":
            cfg.seeds = [int(s) for s in raw.split(",") if s.strip()]
            continue
        section, _, fname = path.partition("_")
        target = getattr(cfg, section, None)
        if section not in _SECTIONS or not hasattr(target, fname):
            raise ConfigError(f"unrecognized override {name}")
        current = getattr(target, fname)
        if isinstance(current, list):
            elem = float if current and isinstance(current[0], float) else int
            setattr(target, fname, [elem(s) for s in raw.split(",") if s.strip()])
        elif isinstance(current, bool):
            setattr(target, fname, raw.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(target, fname, int(raw))
        elif isinstance(current, float):
            setattr(target, fname, float(raw))
        else:
            setattr(target, fname, raw)
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                environ=None) -> ExperimentConfig:
    """Read a YAML or JSON config file, then apply env and explicit overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        text = p.read_text()
        try:
            if p.suffix == ".json":
                data = json.loads(text)
            else:
                data = yaml.safe_load(text) or {}
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = _build(data)
    cfg = _apply_env(cfg, environ)
    for key, value in (overrides or {}).items():
        section, _, fname = key.partition(".")
        if fname and section in _SECTIONS:
            if not hasattr(getattr(cfg, section), fname):
                raise ConfigError(f"unknown override {key!r}")
            setattr(getattr(cfg, section), fname, value)
        elif hasattr(cfg, key) and not fname:
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown override {key!r}")
    return cfg.validate()
