"""Seeded paired-modality data with controllable group-conditional bias.

Per sample: pick a group of the biased attribute, a Bernoulli(0.5) label and
a latent ``u ~ N(s * y * 1 + shift[g], noise[g]^2 I)``. Image features are
``A_img u + feature noise``; text features mix ``A_txt u`` with independent
noise according to ``cross_modal_correlation``. Samples are produced in
fixed-size shards, each with its own stream derived from ``(seed, shard)``, so
the output does not depend on how shards are scheduled.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import AttributeSchema, Dataset, Sample
from .encoders import EncoderParams, forward
from .ot import EmpiricalDistribution, SinkhornConfig, sinkhorn_distance

SHARD_SIZE = 1000


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int
    image_dim: int
    text_dim: int
    latent_dim: int
    schema: AttributeSchema
    group_attribute: str
    group_proportions: tuple[float, ...]
    group_shift: tuple[tuple[float, ...], ...]
    group_noise_scale: tuple[float, ...]
    label_signal_strength: float = 1.0
    cross_modal_correlation: float = 0.8
    feature_noise_scale: float = 0.1
    other_proportions: Mapping[str, Sequence[float]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples: must be >= 0")
        for name in ("image_dim", "text_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be positive")
        levels = self.schema.levels(self.group_attribute)
        k = len(levels)
        props = tuple(float(p) for p in self.group_proportions)
        if len(props) != k or any(p < 0 for p in props) or abs(sum(props) - 1.0) > 1e-9:
            raise ValueError(f"group_proportions: need {k} non-negative values summing to 1, got {props}")
        shift = tuple(tuple(float(x) for x in row) for row in self.group_shift)
        if len(shift) != k or any(len(row) != self.latent_dim for row in shift):
            raise ValueError(f"group_shift: need {k} vectors of length latent_dim={self.latent_dim}")
        noise = tuple(float(x) for x in self.group_noise_scale)
        if len(noise) != k or any(x <= 0 for x in noise):
            raise ValueError(f"group_noise_scale: need {k} positive values")
        if not self.label_signal_strength > 0:
            raise ValueError("label_signal_strength: must be > 0")
        if not 0.0 <= self.cross_modal_correlation <= 1.0:
            raise ValueError("cross_modal_correlation: must be in [0, 1]")
        if self.feature_noise_scale < 0:
            raise ValueError("feature_noise_scale: must be >= 0")
        others = {}
        for name in self.schema.names:
            if name == self.group_attribute:
                continue
            n_lv = len(self.schema.levels(name))
            p = tuple(float(x) for x in self.other_proportions.get(name, [1.0 / n_lv] * n_lv))
            if len(p) != n_lv or abs(sum(p) - 1.0) > 1e-9:
                raise ValueError(f"other_proportions.{name}: need {n_lv} values summing to 1")
            others[name] = p
        unknown = set(self.other_proportions) - set(others)
        if unknown:
            raise ValueError(f"other_proportions: unknown attributes {sorted(unknown)}")
        object.__setattr__(self, "group_proportions", props)
        object.__setattr__(self, "group_shift", shift)
        object.__setattr__(self, "group_noise_scale", noise)
        object.__setattr__(self, "other_proportions", others)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema"] = self.schema.to_dict()
        d["group_shift"] = [list(r) for r in self.group_shift]
        d["group_proportions"] = list(self.group_proportions)
        d["group_noise_scale"] = list(self.group_noise_scale)
        d["other_proportions"] = {k: list(v) for k, v in self.other_proportions.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        d = dict(d)
        schema = d.pop("schema")
        if isinstance(schema, Mapping) and "attributes" in schema:
            schema = AttributeSchema(tuple((a["name"], tuple(a["levels"])) for a in schema["attributes"]))
        elif isinstance(schema, Mapping):
            schema = AttributeSchema.from_dict(schema)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown generator fields: {sorted(extra)}")
        return cls(schema=schema, **d)


def _projections(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xA11CE])))
    a_img = rng.normal(0.0, 1.0 / np.sqrt(cfg.latent_dim), size=(cfg.image_dim, cfg.latent_dim))
    a_txt = rng.normal(0.0, 1.0 / np.sqrt(cfg.latent_dim), size=(cfg.text_dim, cfg.latent_dim))
    return a_img, a_txt


def generate_shard(cfg: GeneratorConfig, shard: int) -> list[Sample]:
    start = shard * SHARD_SIZE
    n = max(0, min(SHARD_SIZE, cfg.n_samples - start))
    if n == 0:
        return []
    a_img, a_txt = _projections(cfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, shard])))
    k = len(cfg.group_proportions)
    groups = rng.choice(k, size=n, p=np.asarray(cfg.group_proportions))
    labels = rng.integers(0, 2, size=n)
    shift = np.asarray(cfg.group_shift)[groups]
    scale = np.asarray(cfg.group_noise_scale)[groups]
    latent = (cfg.label_signal_strength * labels[:, None] + shift
              + scale[:, None] * rng.standard_normal((n, cfg.latent_dim)))
    image = latent @ a_img.T + cfg.feature_noise_scale * rng.standard_normal((n, cfg.image_dim))
    rho = cfg.cross_modal_correlation
    text = rho * (latent @ a_txt.T) + (1.0 - rho) * rng.standard_normal((n, cfg.text_dim))
    others = {name: rng.choice(len(p), size=n, p=np.asarray(p))
              for name, p in cfg.other_proportions.items()}

    samples = []
    for i in range(n):
        values = {cfg.group_attribute: int(groups[i])}
        values.update({name: int(v[i]) for name, v in others.items()})
        values = {name: values[name] for name in cfg.schema.names}
        samples.append(Sample(f"s{start + i:07d}", image[i], text[i], int(labels[i]), values))
    return samples


def generate(cfg: GeneratorConfig) -> Dataset:
    n_shards = -(-cfg.n_samples // SHARD_SIZE)
    samples = []
    for shard in range(n_shards):
        samples += generate_shard(cfg, shard)
    return Dataset(cfg.schema, tuple(samples), cfg.image_dim, cfg.text_dim)


def paired_cosines(ds: Dataset, image_encoder: EncoderParams, text_encoder: EncoderParams,
                   indices=None) -> np.ndarray:
    zi = forward(image_encoder, ds.image_matrix(indices))
    zt = forward(text_encoder, ds.text_matrix(indices))
    num = np.sum(zi * zt, axis=1)
    return num / (np.linalg.norm(zi, axis=1) * np.linalg.norm(zt, axis=1))


def measure_group_gap(ds: Dataset, image_encoder: EncoderParams, text_encoder: EncoderParams,
                      attribute_name: str, sinkhorn: SinkhornConfig = SinkhornConfig()) -> dict[int, float]:
    """Debiased Sinkhorn distance from the whole-dataset paired-similarity
    distribution to each group's, one value per non-empty level."""
    order = sorted(range(len(ds)), key=lambda i: ds.samples[i].id)
    cos = paired_cosines(ds, image_encoder, text_encoder, order)
    groups = ds.attribute_array(attribute_name)[order]
    cfg = dataclasses.replace(sinkhorn, debias=True)
    overall = EmpiricalDistribution.uniform(cos)
    gaps = {}
    for level in range(len(ds.schema.levels(attribute_name))):
        mask = groups == level
        if not mask.any():
            continue
        gaps[level] = sinkhorn_distance(overall, EmpiricalDistribution.uniform(cos[mask]), cfg)
    return gaps
