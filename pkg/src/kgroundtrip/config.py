"""Run configuration: nested dataclasses loaded from YAML with strict keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .gct import GctConfig


class ConfigError(ValueError):
    pass


@dataclass
class KgSection:
    n_per_type: Dict[str, int] = field(default_factory=lambda: {"diagnosis": 20, "procedure": 20})
    edge_density: float = 0.3
    bidirectional_fraction: float = 0.5


@dataclass
class CohortSection:
    n_visits: int = 500
    diag_per_visit: List[int] = field(default_factory=lambda: [1, 3])
    noise_rate: float = 0.05
    link_prob: float = 0.8
    risk_size: int = 2
    label_noise: float = 0.2
    max_tokens: Optional[int] = None   # None: longest visit


@dataclass
class ModelSection:
    num_blocks: int = 3
    embed_dim: int = 16
    mlp_hidden: int = 32
    lam: float = 1.0
    learning_rate: float = 1e-3
    steps: int = 2000
    batch_size: int = 16
    eval_every: int = 100
    eval_fraction: float = 0.2
    loss_mode: str = "original"

    def gct(self, seed: int, loss_mode: Optional[str] = None) -> GctConfig:
        kw = asdict(self)
        if loss_mode is not None:
            kw["loss_mode"] = loss_mode
        return GctConfig(seed=seed, **kw)


@dataclass
class ExtractSection:
    layer: Optional[int] = None        # None: last block
    mode: str = "greedy"
    tau: float = 0.2
    max_hops: int = 3
    beam_width: Optional[int] = 4
    match_floor: float = 0.0
    candidates: str = "cross_type"
    aggregation: str = "max"


@dataclass
class OutputSection:
    directory: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 42
    kg: KgSection = field(default_factory=KgSection)
    cohort: CohortSection = field(default_factory=CohortSection)
    model: ModelSection = field(default_factory=ModelSection)
    extract: ExtractSection = field(default_factory=ExtractSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)


def derive_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(fields)}")
    kw = {}
    for name, value in data.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        kw[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {"kg": KgSection, "cohort": CohortSection, "model": ModelSection,
             "extract": ExtractSection, "output": OutputSection}


def config_from_dict(data: Optional[dict]) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "config")
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(data)


def validate(cfg: RunConfig) -> None:
    try:
        cfg.model.gct(seed=0)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    if len(cfg.cohort.diag_per_visit) != 2:
        raise ConfigError("cohort.diag_per_visit must be [low, high]")
    if cfg.extract.mode not in ("greedy", "threshold"):
        raise ConfigError("extract.mode must be greedy or threshold")
    if cfg.extract.layer is not None and not 1 <= cfg.extract.layer <= cfg.model.num_blocks:
        raise ConfigError(f"extract.layer must lie in 1..{cfg.model.num_blocks}")
    if cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
