"""Run configuration: one nested YAML document with ``data``, ``model`` and ``train`` sections.

Every dataclass field may appear; anything else is rejected with the offending
dotted key in the message.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import CorruptionSpec, GenSpec, ModalitySpec
from .errors import ConfigError
from .model import ModelConfig
from .numeric import OptimizerKind
from .trainer import TrainConfig

ABLATIONS = ("rsc", "gsc", "warmup", "div")


def imbalanced_data(seed: int = 0) -> GenSpec:
    """Two modalities, class-signal strengths 1.0 and 0.3, four classes, 2500 + 1000 samples."""
    return GenSpec(
        class_count=4,
        samples=2500,
        test_samples=1000,
        modalities=[ModalitySpec(16, 1.0, 0.5), ModalitySpec(16, 0.3, 0.5)],
        seed=seed,
    )


@dataclass
class RunConfig:
    data: GenSpec = field(default_factory=imbalanced_data)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # data seed is offset from the run seed so data and init streams never coincide
    data_seed_offset: int = 100

    def __post_init__(self):
        dims = tuple(m.input_dim for m in self.data.modalities)
        if dims != self.model.input_dims:
            raise ConfigError(f"data input dims {dims} disagree with model.input_dims {self.model.input_dims}")
        if self.data.class_count != self.model.class_count:
            raise ConfigError("data.class_count and model.class_count disagree")

    def for_seed(self, seed: int) -> "RunConfig":
        data = dataclasses.replace(self.data, seed=seed + self.data_seed_offset)
        train = dataclasses.replace(self.train, seed=seed)
        return RunConfig(data, self.model, train, self.data_seed_offset)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"]["input_dims"] = list(self.model.input_dims)
        out["data"]["corruption"]["modalities"] = list(self.data.corruption.modalities)
        return out


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
    return raw


def _data(raw, path="data") -> GenSpec:
    raw = dict(_build(GenSpec, raw, path))
    if "modalities" in raw:
        raw["modalities"] = [ModalitySpec(**_build(ModalitySpec, m, f"{path}.modalities[{i}]"))
                             for i, m in enumerate(raw["modalities"])]
    if "corruption" in raw:
        raw["corruption"] = CorruptionSpec(**_build(CorruptionSpec, raw["corruption"], f"{path}.corruption"))
    return GenSpec(**raw)


def _train(raw, path="train") -> TrainConfig:
    raw = dict(_build(TrainConfig, raw, path))
    if "optimizer" in raw:
        raw["optimizer"] = OptimizerKind(**_build(OptimizerKind, raw["optimizer"], f"{path}.optimizer"))
    return TrainConfig(**raw)


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(_build(RunConfig, raw or {}, ""))
    kwargs = {}
    if "data" in raw:
        kwargs["data"] = _data(raw["data"])
    if "model" in raw:
        kwargs["model"] = ModelConfig(**_build(ModelConfig, raw["model"], "model"))
    if "train" in raw:
        kwargs["train"] = _train(raw["train"])
    if "data_seed_offset" in raw:
        kwargs["data_seed_offset"] = int(raw["data_seed_offset"])
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def apply_ablation(cfg: RunConfig, what: str) -> RunConfig:
    """Switch one part of the method off.

    rsc: select all n components and drop the diversity loss.
    gsc: constant unit weights on the unimodal losses.
    warmup: no warm-up epochs.
    div: drop the diversity loss only.
    """
    train, model = cfg.train, cfg.model
    if what == "rsc":
        model = dataclasses.replace(model, top_k=model.component_count)
        train = dataclasses.replace(train, lambda1=0.0, lambda2=0.0)
    elif what == "gsc":
        train = dataclasses.replace(train, a=0.0, b=1.0)
    elif what == "warmup":
        train = dataclasses.replace(train, warmup_epochs=0)
    elif what == "div":
        train = dataclasses.replace(train, lambda1=0.0, lambda2=0.0)
    else:
        raise ConfigError(f"unknown ablation {what!r}; choose from {', '.join(ABLATIONS)}")
    return RunConfig(cfg.data, model, train, cfg.data_seed_offset)


def baseline(cfg: RunConfig) -> RunConfig:
    """The plain trainer: fused CE plus unweighted unimodal CE on the mean of all components."""
    train = dataclasses.replace(cfg.train, method="baseline", lambda1=0.0, lambda2=0.0, a=0.0, b=1.0)
    model = dataclasses.replace(cfg.model, top_k=cfg.model.component_count)
    return RunConfig(cfg.data, model, train, cfg.data_seed_offset)
