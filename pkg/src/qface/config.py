"""Run configuration: a strict JSON document with fixed sections.

Unknown keys anywhere are rejected; every field has a documented default,
and the fully-resolved config is echoed into each run directory so a run
is reproducible from its outputs alone.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .model import ModelConfig
from .optim import OptimConfig, ScheduleConfig
from .tasks import TaskSpec, desk_task_suite


@dataclass(frozen=True)
class MffSection:
    enabled: bool = True


@dataclass(frozen=True)
class DecoderSection:
    heads: int = 4


@dataclass(frozen=True)
class DataSection:
    n_train: int = 4096
    n_test: int = 1024
    batch_size: int = 32
    mask_ratio: float = 0.75
    eval_max_images: int = 0  # 0 = use the whole test split


@dataclass(frozen=True)
class SeedsSection:
    master: int = 0


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mff: MffSection = field(default_factory=MffSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    tasks: tuple = field(default_factory=desk_task_suite)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataSection = field(default_factory=DataSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    def model_config(self, use_mff: bool | None = None, tasks=None) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder,
            tasks=tuple(tasks if tasks is not None else self.tasks),
            use_mff=self.mff.enabled if use_mff is None else use_mff,
            decoder_heads=self.decoder.heads,
        )


def default_pretrain_schedule() -> ScheduleConfig:
    return ScheduleConfig(peak_lr=2e-3, warmup_steps=100, total_steps=2000,
                          floor_lr=1e-6, layer_decay=1.0, eval_every=0)


def _build_section(cls, d: dict, path: str, transforms: dict | None = None):
    if not isinstance(d, dict):
        raise ValueError(f"config section '{path}' must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValueError(f"unknown config key(s) {unknown} in section '{path}'")
    kwargs = dict(d)
    for key, fn in (transforms or {}).items():
        if key in kwargs:
            kwargs[key] = fn(kwargs[key])
    return cls(**kwargs)


_SECTIONS = ("encoder", "mff", "decoder", "tasks", "optimizer", "schedule", "data", "seeds")


def run_config_from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config section(s) {unknown}; expected {list(_SECTIONS)}")
    kwargs = {}
    if "encoder" in doc:
        kwargs["encoder"] = _build_section(EncoderConfig, doc["encoder"], "encoder",
                                           {"fusion_layers": tuple})
    if "mff" in doc:
        kwargs["mff"] = _build_section(MffSection, doc["mff"], "mff")
    if "decoder" in doc:
        kwargs["decoder"] = _build_section(DecoderSection, doc["decoder"], "decoder")
    if "tasks" in doc:
        if not isinstance(doc["tasks"], list):
            raise ValueError("config section 'tasks' must be a list")
        kwargs["tasks"] = tuple(
            _build_section(TaskSpec, t, f"tasks[{i}]") for i, t in enumerate(doc["tasks"])
        )
    if "optimizer" in doc:
        kwargs["optimizer"] = _build_section(OptimConfig, doc["optimizer"], "optimizer")
    if "schedule" in doc:
        kwargs["schedule"] = _build_section(ScheduleConfig, doc["schedule"], "schedule")
    if "data" in doc:
        kwargs["data"] = _build_section(DataSection, doc["data"], "data")
    if "seeds" in doc:
        kwargs["seeds"] = _build_section(SeedsSection, doc["seeds"], "seeds")
    return RunConfig(**kwargs)


def run_config_to_dict(cfg: RunConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["encoder"]["fusion_layers"] = list(cfg.encoder.fusion_layers)
    doc["tasks"] = [dataclasses.asdict(t) for t in cfg.tasks]
    return doc


def load_run_config(path: str | None, seed: int | None = None) -> RunConfig:
    """Read a config file (or take all defaults); --seed overrides the master seed."""
    if path is None:
        cfg = RunConfig()
    else:
        with open(path) as fh:
            cfg = run_config_from_dict(json.load(fh))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seeds=SeedsSection(master=seed))
    return cfg


def echo_config(cfg: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(run_config_to_dict(cfg), fh, sort_keys=True, indent=1)
        fh.write("\n")
