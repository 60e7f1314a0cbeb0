"""Run configuration: TOML file with [data], [model], [train], [fair], [probe], [report]."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .contrastive import FairClipConfig
from .data import BatchSpec
from .encoders import ADAM_PRESETS
from .ot import SinkhornConfig
from .synthetic import GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    dir: str = "data"
    attribute: str = "race"
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    generator: GeneratorConfig | None = None


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "linear"
    embed_dim: int = 16
    hidden_dim: int | None = None
    temperature: float = 0.07


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "fairclip"
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-5
    adam_preset: str = "default"
    beta1: float | None = None
    beta2: float | None = None
    weight_decay: float = 6e-5
    checkpoint_every: int = 0
    eval_every: int = 1


@dataclass(frozen=True)
class FairConfig:
    lambda_fair: float = 1e-7
    group_batch_size: int = 32
    epsilon: float = 0.1
    epsilon_mode: str = "relative"
    max_iters: int = 1000
    tolerance: float = 1e-6
    cost_kind: str = "squared"
    debias: bool = False
    anneal: float = 0.0


@dataclass(frozen=True)
class ProbeConfig:
    probe_kind: str = "logistic"
    learning_rate: float = 1e-2
    epochs: int = 300
    l2: float = 1e-4
    seed: int | None = None
    threshold: float = 0.5


@dataclass(frozen=True)
class ReportConfig:
    model: str = ""
    prompts: str = "data/prompts.json"
    out_dir: str = "run"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fair: FairConfig = field(default_factory=FairConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self):
        _validate(self)

    # derived views ---------------------------------------------------------

    @property
    def lambda_fair(self) -> float:
        return 0.0 if self.train.mode == "clip" else self.fair.lambda_fair

    @property
    def betas(self) -> tuple[float, float]:
        b1, b2 = ADAM_PRESETS[self.train.adam_preset]
        return (self.train.beta1 if self.train.beta1 is not None else b1,
                self.train.beta2 if self.train.beta2 is not None else b2)

    @property
    def probe_seed(self) -> int:
        return self.seed if self.probe.seed is None else self.probe.seed

    def sinkhorn_config(self) -> SinkhornConfig:
        f = self.fair
        return SinkhornConfig(epsilon=f.epsilon, max_iters=f.max_iters, tolerance=f.tolerance,
                              cost_kind=f.cost_kind, debias=f.debias,
                              epsilon_mode=f.epsilon_mode, anneal=f.anneal)

    def fairclip_config(self) -> FairClipConfig:
        return FairClipConfig(lambda_fair=self.lambda_fair, attribute_name=self.data.attribute,
                              group_batch_size=self.fair.group_batch_size,
                              sinkhorn=self.sinkhorn_config())

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.train.batch_size, self.fair.group_batch_size, self.seed)

    def generator_config(self) -> GeneratorConfig:
        if self.data.generator is None:
            raise ConfigError("[data.generator]: section missing")
        return dataclasses.replace(self.data.generator, seed=self.seed)

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if out_dir is not None:
            cfg = dataclasses.replace(cfg, report=dataclasses.replace(cfg.report, out_dir=str(out_dir)))
        return cfg

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for section in ("data", "model", "train", "fair", "probe", "report"):
            sub = dataclasses.asdict(getattr(self, section))
            if section == "data":
                sub["split"] = list(self.data.split)
                sub["generator"] = None if self.data.generator is None else self.data.generator.to_dict()
            d[section] = sub
        return d

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RunConfig":
        raw = dict(raw)
        allowed = {"seed", "data", "model", "train", "fair", "probe", "report"}
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        sections = {}
        for name, klass in (("model", ModelConfig), ("train", TrainConfig), ("fair", FairConfig),
                            ("probe", ProbeConfig), ("report", ReportConfig)):
            sections[name] = _build(klass, raw.get(name) or {}, name)
        data_raw = dict(raw.get("data") or {})
        gen_raw = data_raw.pop("generator", None)
        if "split" in data_raw:
            data_raw["split"] = tuple(float(x) for x in data_raw["split"])
        data = _build(DataConfig, data_raw, "data")
        if gen_raw is not None:
            gen_raw = dict(gen_raw)
            gen_raw.setdefault("seed", int(raw.get("seed", 0)))
            if "group_shift" in gen_raw:
                gen_raw["group_shift"] = tuple(tuple(r) for r in gen_raw["group_shift"])
            try:
                generator = GeneratorConfig.from_dict(gen_raw)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"[data.generator] {exc}") from exc
            data = dataclasses.replace(data, generator=generator)
        try:
            return cls(seed=int(raw.get("seed", 0)), data=data, **sections)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        """SHA-256 over the canonical config, excluding the output location."""
        d = self.to_dict()
        d["report"].pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(klass, raw: Mapping[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return klass(**raw)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _validate(cfg: RunConfig) -> None:
    def need(cond, where, msg):
        if not cond:
            raise ConfigError(f"[{where}] {msg}")

    need(0 <= cfg.seed < 2 ** 64, "root", "seed: must be a 64-bit unsigned integer")
    split = cfg.data.split
    need(len(split) == 3 and all(x >= 0 for x in split) and abs(sum(split) - 1.0) < 1e-9,
         "data", f"split: need three non-negative fractions summing to 1, got {list(split)}")
    need(cfg.model.kind in ("linear", "mlp1"), "model", f"kind: unknown encoder {cfg.model.kind!r}")
    need(cfg.model.kind != "mlp1" or (cfg.model.hidden_dim or 0) > 0, "model",
         "hidden_dim: required for mlp1")
    need(cfg.model.embed_dim > 0, "model", "embed_dim: must be positive")
    need(cfg.model.temperature > 0, "model", "temperature: must be > 0")
    t = cfg.train
    need(t.mode in ("clip", "fairclip"), "train", f"mode: expected clip or fairclip, got {t.mode!r}")
    need(t.epochs >= 0, "train", "epochs: must be >= 0")
    need(t.batch_size >= 2, "train", "batch_size: must be >= 2")
    need(t.learning_rate > 0, "train", "learning_rate: must be > 0")
    need(t.adam_preset in ADAM_PRESETS, "train", f"adam_preset: one of {sorted(ADAM_PRESETS)}")
    need(t.weight_decay >= 0, "train", "weight_decay: must be >= 0")
    need(t.checkpoint_every >= 0 and t.eval_every >= 0, "train", "cadences must be >= 0")
    f = cfg.fair
    need(f.lambda_fair >= 0, "fair", "lambda_fair: must be >= 0")
    need(f.group_batch_size >= 1, "fair", "group_batch_size: must be >= 1")
    try:
        cfg.sinkhorn_config()
    except ValueError as exc:
        raise ConfigError(f"[fair] {exc}") from exc
    p = cfg.probe
    need(p.probe_kind == "logistic", "probe", f"probe_kind: only 'logistic' is supported")
    need(p.epochs >= 0 and p.learning_rate > 0 and p.l2 >= 0, "probe",
         "epochs >= 0, learning_rate > 0, l2 >= 0 required")
    gen = cfg.data.generator
    if gen is not None:
        need(cfg.data.attribute in gen.schema.names, "data",
             f"attribute: {cfg.data.attribute!r} not in generator schema {gen.schema.names}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(raw)
