"""Pipeline configuration file.

The file is YAML restricted to nested mappings, lists and scalars. Top-level
sections are ``seed``, ``solver``, ``dataset``, ``masks``, ``model``,
``training`` (with ``stage1`` and ``stage2`` subsections) and ``evaluation``.
Omitted keys take their defaults; a missing ``seed`` inside ``dataset``
(``base_seed``) or a training stage falls back to the global ``seed``. Unknown
keys are rejected.

:func:`dumps` writes the canonical form: every key explicit, keys sorted,
block style. ``dumps(loads(text)) == text`` for canonical text.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from vqfill.dataset import DatasetSpec
from vqfill.errors import ConfigError
from vqfill.masking import MaskConfig, default_mask_configs
from vqfill.model import ArchSpec
from vqfill.solver import SolverParams
from vqfill.training import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    pdf_bins: int = 81
    pdf_sigmas: float = 4.0
    num_samples: int = 5


def _desk_stage1() -> TrainConfig:
    return TrainConfig(stage=1)


def _desk_stage2() -> TrainConfig:
    return TrainConfig(stage=2)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    solver: SolverParams = field(default_factory=SolverParams)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    masks: dict[str, MaskConfig] = field(default_factory=lambda: default_mask_configs(64))
    model: ArchSpec = field(default_factory=ArchSpec)
    stage1: TrainConfig = field(default_factory=_desk_stage1)
    stage2: TrainConfig = field(default_factory=_desk_stage2)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def mask(self, name: str) -> MaskConfig:
        if name not in self.masks:
            raise ConfigError(f"unknown mask {name!r}; configured: {sorted(self.masks)}")
        return self.masks[name]

    def to_dict(self) -> dict[str, Any]:
        ds = self.dataset.to_dict()
        ds.pop("solver")
        return {
            "seed": self.seed,
            "solver": dataclasses.asdict(self.solver),
            "dataset": ds,
            "masks": [dataclasses.asdict(m) for m in self.masks.values()],
            "model": self.model.to_dict(),
            "training": {"stage1": self.stage1.to_dict(), "stage2": self.stage2.to_dict()},
            "evaluation": dataclasses.asdict(self.evaluation),
        }


_SECTIONS = {"seed", "solver", "dataset", "masks", "model", "training", "evaluation"}


def _build(cls, raw: Any, where: str, **forced):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{**raw, **forced})
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict[str, Any]) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown top-level sections {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    solver = _build(SolverParams, raw.get("solver"), "solver")
    ds_raw = dict(raw.get("dataset") or {})
    if "solver" in ds_raw:
        raise ConfigError("dataset: solver parameters belong in the top-level solver section")
    ds_raw.setdefault("base_seed", seed)
    dataset = _build(DatasetSpec, ds_raw, "dataset", solver=solver)

    masks_raw = raw.get("masks")
    if masks_raw is None:
        masks = default_mask_configs(dataset.out_grid)
    else:
        if not isinstance(masks_raw, list):
            raise ConfigError("masks: expected a list of mask definitions")
        masks = {}
        for i, m in enumerate(masks_raw):
            cfg = _build(MaskConfig, m, f"masks[{i}]")
            if cfg.name in masks:
                raise ConfigError(f"masks: duplicate name {cfg.name!r}")
            masks[cfg.name] = cfg

    model_raw = dict(raw.get("model") or {})
    model_raw.setdefault("grid", dataset.out_grid)
    model = _build(ArchSpec, model_raw, "model")

    training = raw.get("training") or {}
    if not isinstance(training, dict) or set(training) - {"stage1", "stage2"}:
        raise ConfigError("training: expected stage1 and/or stage2 subsections")
    stages = []
    for n in (1, 2):
        t = dict(training.get(f"stage{n}") or {})
        if t.get("stage", n) != n:
            raise ConfigError(f"training.stage{n}: stage must be {n}")
        t.setdefault("seed", seed)
        t["stage"] = n
        stages.append(_build(TrainConfig, t, f"training.stage{n}"))
    evaluation = _build(EvalConfig, raw.get("evaluation"), "evaluation")
    return PipelineConfig(seed, solver, dataset, masks, model, stages[0], stages[1], evaluation)


def loads(text: str) -> PipelineConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(raw or {})


def dumps(config: PipelineConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False, allow_unicode=True)


def load(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text(encoding="utf-8"))
