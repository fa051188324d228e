"""Run configuration: one structured config fully specifies every stage.

Configs serialize to JSON; loading merges a (possibly partial) document into
the defaults, so config files only need the keys they override. Every stage
writes its resolved config next to its outputs.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from cardalign.cohort import CohortConfig
from cardalign.downstream import HeadTrainConfig, TaskSpec
from cardalign.vit import VitConfig


@dataclass
class PreprocessConfig:
    highpass_hz: float = 0.5
    notch_hz: float = 60.0
    notch_q: float = 30.0
    sg_window: int = 15
    sg_order: int = 3


@dataclass
class CmrTrunkConfig:
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    embed_dim: int = 256


@dataclass
class StageTrainConfig:
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 64
    warmup_epochs: int = 1
    max_epochs: int = 10
    patience: int = 15
    min_lr: float | None = None


@dataclass
class AlignConfig:
    tau: float = 0.1
    mode: str = "dual_phase"  # none | ed_only | dual_phase
    symmetric: bool = False
    learnable_tau: bool = False
    proj_hidden: int = 512
    proj_dim: int = 128
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 64
    warmup_epochs: int = 1
    max_epochs: int = 12
    patience: int = 15

    def __post_init__(self):
        if self.mode not in ("none", "ed_only", "dual_phase"):
            raise ValueError(f"alignment mode must be none, ed_only, or dual_phase, got {self.mode!r}")


@dataclass
class AblatePreset:
    name: str
    layers: int
    heads: int
    embed_dim: int
    patch_len: int = 25


@dataclass
class AblateConfig:
    presets: tuple = (
        AblatePreset("tiny", 12, 3, 192),
        AblatePreset("small", 12, 6, 384),
        AblatePreset("medium", 12, 8, 576),
        AblatePreset("base", 12, 12, 768),
    )
    max_epochs: int = 4


def default_tasks() -> tuple:
    regression = ("lv_ef", "gcs", "gls", "grs", "lv_edv", "lv_sv", "lv_mass", "cardiac_output")
    binary = ("cad", "af", "scd", "hf", "mi", "cmp")
    tasks = [TaskSpec(t, "regression", t) for t in regression]
    tasks += [TaskSpec(o, "binary", o) for o in binary]
    return tuple(tasks)


# regression tasks counted as "functional" for the uplift summary
FUNCTIONAL_TASKS = ("lv_ef", "gcs", "gls", "grs", "cardiac_output")
STRAIN_TASKS = ("gcs", "gls", "grs")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    precision: str = "f64"  # f64 | f32
    cohort: CohortConfig = field(default_factory=CohortConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    vit: VitConfig = field(default_factory=lambda: VitConfig(layers=3, heads=4, embed_dim=64, patch_len=50))
    cmr: CmrTrunkConfig = field(default_factory=CmrTrunkConfig)
    mae_train: StageTrainConfig = field(default_factory=lambda: StageTrainConfig(base_lr=1e-3, max_epochs=10))
    cmr_train: StageTrainConfig = field(
        default_factory=lambda: StageTrainConfig(base_lr=1e-3, batch_size=16, max_epochs=4)
    )
    align: AlignConfig = field(default_factory=AlignConfig)
    heads: HeadTrainConfig = field(default_factory=HeadTrainConfig)
    tasks: tuple = field(default_factory=default_tasks)
    eval_sources: tuple = ("none", "ed_only", "dual_phase")
    ablate: AblateConfig = field(default_factory=AblateConfig)


def to_dict(cfg) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        return obj

    return plain(cfg)


def _merge_value(current, value):
    if dataclasses.is_dataclass(current) and isinstance(value, dict):
        return _merge_dataclass(current, value)
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        if current and dataclasses.is_dataclass(current[0]):
            template = current[0]
            return tuple(_merge_dataclass(template, v) if isinstance(v, dict) else v for v in value)
        return _deep_tuple(value)
    return value


def _deep_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_deep_tuple(v) for v in value)
    return value


def _merge_dataclass(instance, data: dict):
    unknown = set(data) - {f.name for f in dataclasses.fields(instance)}
    if unknown:
        raise ValueError(f"unknown config keys for {type(instance).__name__}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(instance):
        current = getattr(instance, f.name)
        kwargs[f.name] = _merge_value(current, data[f.name]) if f.name in data else current
    return type(instance)(**kwargs)


def from_dict(data: dict) -> RunConfig:
    """Merge a (possibly partial) config document into the defaults."""
    data = dict(data)
    # tasks are rebuilt explicitly (entries are independent, not overrides of
    # the default list)
    tasks = data.pop("tasks", None)
    cfg = _merge_dataclass(RunConfig(), data)
    if tasks is not None:
        cfg = dataclasses.replace(
            cfg, tasks=tuple(TaskSpec(**t) if isinstance(t, dict) else t for t in tasks)
        )
    return cfg


def to_json(cfg) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def load_config(path) -> RunConfig:
    return from_dict(json.loads(Path(path).read_text()))


def set_by_path(data: dict, dotted: str, raw_value: str) -> None:
    """Apply one `a.b.c=value` override onto a config dict (value parsed as JSON
    when possible, else taken as a string)."""
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node[keys[-1]] = value
