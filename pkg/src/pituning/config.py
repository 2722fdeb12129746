"""Experiment configuration: nested dataclasses read from ``section.key = value`` text files."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .device import FinetuneConfig, UnlearnConfig
from .distill import DistillConfig
from .population import PopulationTrainConfig
from .tree import TreeConfig


@dataclass
class DataSection:
    path: str = ""                 # population dataset file; empty means synthetic
    device_path: str = ""          # device cohort file; empty means synthetic
    n_users: int = 200
    n_locations: int = 10
    n_timeslots: int = 48
    n_events: int = 20
    n_intents: int = 8
    window: int = 30
    noise_rate: float = 0.1
    switch_rate: float = 0.1
    events_per_user: int = 60
    n_clusters: int = 3
    n_tail: int = 2
    tail_weight: float = 0.1
    tail_focus: float = 0.6
    device_users: int = 50
    device_events: int = 150
    device_tail_weight: float = -1.0   # negative keeps the population mix
    val_fraction: float = 0.1          # per-user chronological hold-out for population validation
    device_split: tuple = (0.6, 0.1, 0.3)


@dataclass
class ModelSection:
    embed_dim: int = 32
    teacher_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    attention_hidden: int = 64
    head_hidden: int = 64
    use_iat: bool = True
    normalize_attention: bool = False


@dataclass
class EvalSection:
    ks: tuple = (3, 5)


@dataclass
class RunSection:
    out_dir: str = "runs/default"
    seed: int = 0
    unlearning: bool = True            # ablation toggle for the device stage
    device_fraction: float = 1.0       # share of each user's training windows used on device
    p_in_smoothing: float = 1.0
    p_in_source: str = "device"        # "population" makes every user look like the population
    tree_baseline: bool = False
    workers: int = 1


def _desk_distill() -> DistillConfig:
    return DistillConfig(student_layers=1, max_epochs=8)


def _desk_population() -> PopulationTrainConfig:
    return PopulationTrainConfig(max_epochs=6)


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    population: PopulationTrainConfig = field(default_factory=_desk_population)
    distill: DistillConfig = field(default_factory=_desk_distill)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        for name in ("population", "distill", "unlearn"):
            section = getattr(self, name)
            post = getattr(section, "__post_init__", None)
            if post:
                post()
        d = self.data
        if abs(sum(d.device_split) - 1.0) > 1e-9 or len(d.device_split) != 3:
            raise ValueError("data.device_split must be three fractions summing to 1")
        if self.run.p_in_source not in ("device", "population"):
            raise ValueError("run.p_in_source must be 'device' or 'population'")
        if not 0.0 < self.run.device_fraction <= 1.0:
            raise ValueError("run.device_fraction must lie in (0, 1]")
        if (4 * self.model.embed_dim) % self.model.n_heads:
            raise ValueError("4 * model.embed_dim must be divisible by model.n_heads")
        for p in (d.path, d.device_path):
            if p and not os.path.exists(p):
                raise FileNotFoundError(p)
        if bool(d.path) != bool(d.device_path):
            raise ValueError("give both data.path and data.device_path, or neither")
        if not self.eval.ks or min(self.eval.ks) < 1:
            raise ValueError("eval.ks must be positive integers")
        return self

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed: the global seed plus the stage's own offset."""
        offsets = {"data": 0, "device_data": 1000, "population": self.population.seed,
                   "distill": self.distill.seed, "unlearn": self.unlearn.seed, "finetune": self.finetune.seed,
                   "tree": self.tree.seed}
        return self.run.seed + offsets[stage]


def _parse_value(raw: str, current: Any):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [x for x in raw.strip("()[] ").split(",") if x.strip()]
        kind = type(current[0]) if current else float
        return tuple(kind(x) for x in items)
    if isinstance(current, str):
        return raw
    # None defaults: accept JSON literals, else a bare string
    if raw.lower() in ("none", "null", ""):
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def set_key(cfg: ExperimentConfig, key: str, raw: str) -> None:
    try:
        section_name, name = key.split(".", 1)
        section = getattr(cfg, section_name)
    except (ValueError, AttributeError):
        raise KeyError(f"unknown config key {key!r}") from None
    if not dataclasses.is_dataclass(section) or name not in {f.name for f in dataclasses.fields(section)}:
        raise KeyError(f"unknown config key {key!r}")
    setattr(section, name, _parse_value(raw, getattr(section, name)))


def apply_overrides(cfg: ExperimentConfig, overrides: Mapping[str, str] | Iterable[tuple[str, str]]) -> ExperimentConfig:
    items = overrides.items() if isinstance(overrides, Mapping) else overrides
    for key, raw in items:
        set_key(cfg, key, raw)
    return cfg


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'section.key = value'")
        key, raw = line.split("=", 1)
        try:
            set_key(cfg, key.strip(), raw)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"config line {n}: {exc}") from None
    return cfg


def load_config(path: str | os.PathLike | None = None, overrides=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            parse_config_text(fh.read(), cfg)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def flatten(cfg: ExperimentConfig) -> dict[str, Any]:
    out = {}
    for sec in dataclasses.fields(cfg):
        section = getattr(cfg, sec.name)
        for f in dataclasses.fields(section):
            out[f"{sec.name}.{f.name}"] = getattr(section, f.name)
    return out


def config_to_text(cfg: ExperimentConfig) -> str:
    """Every key, one per line; parsing the text back gives an equal config."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in flatten(cfg).items())
