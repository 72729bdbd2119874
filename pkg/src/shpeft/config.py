"""Experiment configuration: a YAML file with a fixed, validated key set."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .analysis import CURVE_GRID, OVERLAP_GRID
from .data import DataSpecError, SyntheticTaskSpec
from .importance import L1_MODES, STRATEGIES
from .masking import PATTERNS
from .models import ModelSpec, SpecError
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"
    base: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    tasks: int = 3
    downstream_n_train: int | None = None
    pretrain_files: dict | None = None
    downstream_files: list | None = None


@dataclass
class ShpeftConfig:
    strategies: list = field(default_factory=lambda: ["L2"])
    lambdas: list = field(default_factory=lambda: [1.0])
    budgets: list = field(default_factory=lambda: [0.01])
    agnostic_only: bool = False
    batches: int = 100
    batch_size: int = 32
    include_head: bool = False
    l1_mode: str = "abs-sum"


@dataclass
class BaselineConfig:
    patterns: list = field(default_factory=lambda: ["full", "head-only", "bias-only", "norm-only",
                                                    "attention-only", "random"])
    random_budgets: list = field(default_factory=lambda: [0.01])


@dataclass
class AnalysisConfig:
    curve_grid: list = field(default_factory=lambda: list(CURVE_GRID))
    overlap_grid: list = field(default_factory=lambda: list(OVERLAP_GRID))
    chance_trials: int = 200


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr0=0.3, iterations=1500))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr0=0.3, iterations=400))
    shpeft: ShpeftConfig = field(default_factory=ShpeftConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    raw_text: str = ""

    def task_names(self) -> list[str]:
        if self.data.kind == "idx":
            return [d["name"] for d in self.data.downstream_files]
        return [f"task{i}" for i in range(1, self.data.tasks + 1)]


_IDX_KEYS = {"train_images", "train_labels", "test_images", "test_labels"}


def _section(raw: dict, name: str, cls, where: str):
    d = raw.get(name, {}) or {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where}{name}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)} - {"raw_text"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}{name}: unknown keys {sorted(unknown)}; allowed: {sorted(known)}")
    return d


def _build(cls, d: dict, where: str):
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _train(raw: dict, name: str, default: TrainConfig) -> TrainConfig:
    d = _section(raw, name, TrainConfig, "")
    cfg = dataclasses.replace(default, **d)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"raw_text"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}; allowed: {sorted(top)}")
    defaults = ExperimentConfig()

    try:
        model = ModelSpec.from_dict(_section(raw, "model", ModelSpec, ""))
        model.validate()
    except SpecError as exc:
        raise ConfigError(f"model: {exc}") from None

    draw = _section(raw, "data", DataConfig, "")
    data = DataConfig(**{k: v for k, v in draw.items() if k != "base"})
    if data.kind not in ("synthetic", "idx"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'idx', got {data.kind!r}")
    try:
        data.base = SyntheticTaskSpec.from_dict(draw.get("base") or {})
        if data.kind == "synthetic":
            data.base.validate()
    except (DataSpecError, TypeError) as exc:
        raise ConfigError(f"data.base: {exc}") from None
    if data.kind == "synthetic":
        if not isinstance(data.tasks, int) or data.tasks < 1:
            raise ConfigError("data.tasks must be an integer >= 1 (downstream family members)")
        if data.base.classes != model.classes:
            raise ConfigError(f"model.classes ({model.classes}) must equal data.base.classes ({data.base.classes})")
        if model.family == "tiny-vit" and (data.base.image_side, data.base.channels) != (model.image_side, model.channels):
            raise ConfigError("model.image_side/channels must match data.base image_side/channels")
        if model.family == "mlp" and int(model.features) != int(data.base.channels * data.base.image_side**2 or data.base.features):
            raise ConfigError("model.features must equal the flattened data input size")
    else:
        files = [data.pretrain_files] + list(data.downstream_files or [])
        if data.pretrain_files is None or not data.downstream_files:
            raise ConfigError("data.kind=idx needs pretrain_files and a non-empty downstream_files list")
        for i, f in enumerate(files):
            if not isinstance(f, dict) or not _IDX_KEYS <= set(f):
                raise ConfigError(f"idx file set #{i} needs keys {sorted(_IDX_KEYS)}")
        names = [f.get("name") for f in data.downstream_files]
        if None in names or len(set(names)) != len(names):
            raise ConfigError("every downstream_files entry needs a unique 'name'")

    pretrain = _train(raw, "pretrain", defaults.pretrain)
    finetune = _train(raw, "finetune", defaults.finetune)

    shpeft = _build(ShpeftConfig, _section(raw, "shpeft", ShpeftConfig, ""), "shpeft")
    bad = [s for s in shpeft.strategies if s not in STRATEGIES]
    if bad:
        raise ConfigError(f"shpeft.strategies: unknown {bad}; allowed {list(STRATEGIES)}")
    if any(not (isinstance(v, (int, float)) and v >= 0) for v in shpeft.lambdas):
        raise ConfigError("shpeft.lambdas must be non-negative numbers")
    _check_budgets(shpeft.budgets, "shpeft.budgets")
    if shpeft.l1_mode not in L1_MODES:
        raise ConfigError(f"shpeft.l1_mode must be one of {list(L1_MODES)}")
    if shpeft.batches < 1 or shpeft.batch_size < 1:
        raise ConfigError("shpeft.batches and shpeft.batch_size must be >= 1")

    baselines = _build(BaselineConfig, _section(raw, "baselines", BaselineConfig, ""), "baselines")
    bad = [p for p in baselines.patterns if p not in PATTERNS]
    if bad:
        raise ConfigError(f"baselines.patterns: unknown {bad}; allowed {list(PATTERNS)}")
    if model.family == "mlp" and "attention-only" in baselines.patterns:
        raise ConfigError("baselines.patterns: attention-only is invalid for the mlp family")
    _check_budgets(baselines.random_budgets, "baselines.random_budgets")

    analysis = _build(AnalysisConfig, _section(raw, "analysis", AnalysisConfig, ""), "analysis")
    _check_budgets(analysis.curve_grid, "analysis.curve_grid")
    _check_budgets(analysis.overlap_grid, "analysis.overlap_grid")

    seeds = raw.get("seeds", defaults.seeds)
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    output_dir = raw.get("output_dir", defaults.output_dir)
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string path")
    return ExperimentConfig(model, data, pretrain, finetune, shpeft, baselines, analysis,
                            list(seeds), output_dir, text)


def _check_budgets(values, where: str) -> None:
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{where} must be a non-empty list")
    for v in values:
        if not isinstance(v, (int, float)) or not 0 < v <= 1:
            raise ConfigError(f"{where}: {v!r} is not a fraction in (0, 1]")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
