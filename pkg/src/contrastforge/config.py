"""Declarative run configuration: one YAML document with nested sections, every
field defaulted, unknown keys rejected. All stochastic behavior is seeded from
here; the backend auth token is the single deliberate exception and comes from
the environment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import InvalidArgumentError, MissingArtifactError
from .graph import BaseTrainConfig
from .training import TrainConfig


@dataclass
class DataSection:
    interactions: str = ""
    attributes: str = ""
    k_core: int = 5
    seed: int = 0


@dataclass
class BaseSection:
    d: int = 64
    L: int = 2
    lr: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20


@dataclass
class PipelineSection:
    backend_url: str = "stub"
    cache_path: str = "cache.jsonl"
    d_enc: int = 64
    lexicon_path: str | None = None
    swap_table_path: str | None = None
    parallelism: int = 4


@dataclass
class TrainSection:
    lam: float = 0.5
    alpha: float = 0.01
    tau: float = 0.1
    lr: float = 1e-3
    freeze_base: bool = True
    align_variant: str = "paper"
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: [10, 20])


_SECTION_KEYS = {
    "data": {"interactions", "attributes", "k_core", "seed"},
    "base": {"d", "L", "lr", "batch_size", "max_epochs", "patience"},
    "pipeline": {"backend_url", "cache_path", "d_enc", "lexicon_path",
                 "swap_table_path", "parallelism"},
    "train": {"lambda", "alpha", "tau", "lr", "freeze_base", "align_variant", "seeds"},
    "eval": {"Ks"},
}


@dataclass
class RunConfig:
    data: DataSection
    base: BaseSection
    pipeline: PipelineSection
    train: TrainSection
    eval: EvalSection
    config_hash: str
    source_path: str

    def base_train_config(self, **overrides) -> BaseTrainConfig:
        kwargs = dict(dim=self.base.d, num_layers=self.base.L, lr=self.base.lr,
                      batch_size=self.base.batch_size, max_epochs=self.base.max_epochs,
                      patience=self.base.patience, seed=self.data.seed)
        kwargs.update(overrides)
        return BaseTrainConfig(**kwargs)

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        kwargs = dict(lam=self.train.lam, alpha=self.train.alpha, tau=self.train.tau,
                      lr=self.train.lr, d=self.base.d, d_enc=self.pipeline.d_enc,
                      hidden=self.pipeline.d_enc, num_layers=self.base.L, seed=seed,
                      freeze_base=self.train.freeze_base,
                      align_variant=self.train.align_variant,
                      batch_size=self.base.batch_size,
                      max_epochs=self.base.max_epochs,
                      patience=self.base.patience)
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    def validate_paths(self) -> None:
        """Every referenced input path must exist before any work starts."""
        required = {"data.interactions": self.data.interactions,
                    "data.attributes": self.data.attributes}
        optional = {"pipeline.lexicon_path": self.pipeline.lexicon_path,
                    "pipeline.swap_table_path": self.pipeline.swap_table_path}
        for name, value in required.items():
            if not value:
                raise InvalidArgumentError(f"config field {name} is required")
            if not Path(value).exists():
                raise MissingArtifactError(f"{name} does not exist: {value}")
        for name, value in optional.items():
            if value is not None and not Path(value).exists():
                raise MissingArtifactError(f"{name} does not exist: {value}")


def _check_section(name: str, raw: dict) -> None:
    if not isinstance(raw, dict):
        raise InvalidArgumentError(f"config section {name!r} must be a mapping")
    unknown = set(raw) - _SECTION_KEYS[name]
    if unknown:
        raise InvalidArgumentError(
            f"unknown key{'s' if len(unknown) > 1 else ''} in section {name!r}: "
            f"{', '.join(sorted(unknown))}")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file does not exist: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise InvalidArgumentError("config root must be a mapping")
    unknown = set(raw) - set(_SECTION_KEYS)
    if unknown:
        raise InvalidArgumentError(
            f"unknown config section{'s' if len(unknown) > 1 else ''}: "
            f"{', '.join(sorted(unknown))}")
    for name in raw:
        _check_section(name, raw[name])

    data_raw = raw.get("data", {})
    base_raw = raw.get("base", {})
    pipe_raw = raw.get("pipeline", {})
    train_raw = raw.get("train", {})
    eval_raw = raw.get("eval", {})

    data = DataSection(
        interactions=str(data_raw.get("interactions", "")),
        attributes=str(data_raw.get("attributes", "")),
        k_core=int(data_raw.get("k_core", 5)),
        seed=int(data_raw.get("seed", 0)))
    base = BaseSection(
        d=int(base_raw.get("d", 64)),
        L=int(base_raw.get("L", 2)),
        lr=float(base_raw.get("lr", 1e-3)),
        batch_size=int(base_raw.get("batch_size", 2048)),
        max_epochs=int(base_raw.get("max_epochs", 1000)),
        patience=int(base_raw.get("patience", 20)))
    pipeline = PipelineSection(
        backend_url=str(pipe_raw.get("backend_url", "stub")),
        cache_path=str(pipe_raw.get("cache_path", "cache.jsonl")),
        d_enc=int(pipe_raw.get("d_enc", 64)),
        lexicon_path=pipe_raw.get("lexicon_path"),
        swap_table_path=pipe_raw.get("swap_table_path"),
        parallelism=int(pipe_raw.get("parallelism", 4)))
    train = TrainSection(
        lam=float(train_raw.get("lambda", 0.5)),
        alpha=float(train_raw.get("alpha", 0.01)),
        tau=float(train_raw.get("tau", 0.1)),
        lr=float(train_raw.get("lr", 1e-3)),
        freeze_base=bool(train_raw.get("freeze_base", True)),
        align_variant=str(train_raw.get("align_variant", "paper")),
        seeds=[int(s) for s in train_raw.get("seeds", [0])])
    eval_section = EvalSection(ks=[int(k) for k in eval_raw.get("Ks", [10, 20])])

    if not train.seeds:
        raise InvalidArgumentError("train.seeds must list at least one seed")
    if not eval_section.ks:
        raise InvalidArgumentError("eval.Ks must list at least one K")

    canonical = json.dumps(raw, sort_keys=True, ensure_ascii=False)
    config_hash = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    return RunConfig(data=data, base=base, pipeline=pipeline, train=train,
                     eval=eval_section, config_hash=config_hash,
                     source_path=str(path))
