"""Paired-modality samples, protected-attribute schema, file I/O and batch samplers.

Dataset files are JSON lines. The first line is a header
``{"format_version": 1, "image_dim": d_i, "text_dim": d_t}``; each following
line is one record::

    {"id": "s0001", "image_features": [...], "text_features": [...],
     "label": 1, "race": "Asian", "gender": "Female"}

Schema files are a single JSON document with the same ``format_version``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_RESERVED = ("id", "image_features", "text_features", "label")


class DatasetFormatError(ValueError):
    """Malformed dataset or schema file; the message names the offending line."""


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        attrs = tuple((str(name), tuple(str(x) for x in levels)) for name, levels in self.attributes)
        names = [name for name, _ in attrs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names in {names}")
        for name, levels in attrs:
            if name in _RESERVED:
                raise ValueError(f"attribute name {name!r} is reserved")
            if len(levels) < 2:
                raise ValueError(f"attribute {name!r} needs at least 2 levels")
            if len(set(levels)) != len(levels):
                raise ValueError(f"attribute {name!r} has duplicate levels")
        object.__setattr__(self, "attributes", attrs)

    @classmethod
    def from_dict(cls, mapping: dict[str, Sequence[str]]) -> "AttributeSchema":
        return cls(tuple((k, tuple(v)) for k, v in mapping.items()))

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.attributes]

    def levels(self, attribute: str) -> tuple[str, ...]:
        for name, levels in self.attributes:
            if name == attribute:
                return levels
        raise KeyError(f"unknown attribute {attribute!r}; schema has {self.names}")

    def level_index(self, attribute: str, level: str) -> int:
        levels = self.levels(attribute)
        try:
            return levels.index(level)
        except ValueError:
            raise KeyError(f"unknown level {level!r} for attribute {attribute!r}") from None

    def to_dict(self) -> dict:
        return {"attributes": [{"name": n, "levels": list(lv)} for n, lv in self.attributes]}


@dataclass(frozen=True)
class Sample:
    id: str
    image_features: np.ndarray
    text_features: np.ndarray
    label: int
    attribute_values: dict[str, int]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"sample {self.id}: label must be 0 or 1")
        for name in ("image_features", "text_features"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"sample {self.id}: {name} contains non-finite values")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Dataset:
    schema: AttributeSchema
    samples: tuple[Sample, ...]
    image_dim: int
    text_dim: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.image_dim < 1 or self.text_dim < 1:
            raise ValueError("dims must be positive")
        seen = set()
        for i, s in enumerate(self.samples):
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            _validate_sample(s, self.schema, self.image_dim, self.text_dim)

    def __len__(self) -> int:
        return len(self.samples)

    def image_matrix(self, indices: Sequence[int] | None = None) -> np.ndarray:
        rows = self.samples if indices is None else [self.samples[i] for i in indices]
        if not rows:
            return np.zeros((0, self.image_dim))
        return np.stack([s.image_features for s in rows])

    def text_matrix(self, indices: Sequence[int] | None = None) -> np.ndarray:
        rows = self.samples if indices is None else [self.samples[i] for i in indices]
        if not rows:
            return np.zeros((0, self.text_dim))
        return np.stack([s.text_features for s in rows])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def attribute_array(self, attribute: str) -> np.ndarray:
        self.schema.levels(attribute)
        return np.array([s.attribute_values[attribute] for s in self.samples], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.schema, tuple(self.samples[i] for i in indices),
                       self.image_dim, self.text_dim)


def _validate_sample(s: Sample, schema: AttributeSchema, image_dim: int, text_dim: int) -> None:
    if s.image_features.shape != (image_dim,) or s.text_features.shape != (text_dim,):
        raise ValueError(
            f"sample {s.id}: feature dims {s.image_features.size}/{s.text_features.size} "
            f"do not match dataset dims {image_dim}/{text_dim}")
    if set(s.attribute_values) != set(schema.names):
        raise ValueError(f"sample {s.id}: attributes {sorted(s.attribute_values)} "
                         f"do not match schema {schema.names}")
    for name, levels in schema.attributes:
        v = s.attribute_values[name]
        if not 0 <= v < len(levels):
            raise ValueError(f"sample {s.id}: level index {v} out of range for {name!r}")


@dataclass(frozen=True)
class GroupPartition:
    attribute_name: str
    groups: dict[int, list[int]]

    def sizes(self) -> dict[int, int]:
        return {k: len(v) for k, v in self.groups.items()}

    def non_empty_levels(self) -> list[int]:
        return [k for k in sorted(self.groups) if self.groups[k]]


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 32
    group_batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the contrastive loss needs negatives)")
        if self.group_batch_size < 1:
            raise ValueError("group_batch_size must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


# ---------------------------------------------------------------- file I/O


def read_schema(path) -> tuple[AttributeSchema, int, int]:
    """Schema file -> (attribute schema, image_dim, text_dim)."""
    try:
        doc = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    schema = AttributeSchema(tuple((a["name"], tuple(a["levels"])) for a in doc["attributes"]))
    return schema, int(doc["image_dim"]), int(doc["text_dim"])


def write_schema(path, schema: AttributeSchema, image_dim: int, text_dim: int) -> None:
    doc = {"format_version": FORMAT_VERSION, "image_dim": image_dim, "text_dim": text_dim}
    doc.update(schema.to_dict())
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _record(sample: Sample, schema: AttributeSchema) -> dict:
    rec = {
        "id": sample.id,
        "image_features": sample.image_features.tolist(),
        "text_features": sample.text_features.tolist(),
        "label": int(sample.label),
    }
    for name, levels in schema.attributes:
        rec[name] = levels[sample.attribute_values[name]]
    return rec


def write_dataset(path, ds: Dataset) -> None:
    header = {"format_version": FORMAT_VERSION, "image_dim": ds.image_dim, "text_dim": ds.text_dim}
    lines = [json.dumps(header)]
    lines += [json.dumps(_record(s, ds.schema)) for s in ds.samples]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, schema: AttributeSchema, image_dim: int | None = None,
                 text_dim: int | None = None) -> Dataset:
    """Read a dataset file. Dims default to the header's, then to the first record's."""
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}:1: malformed header ({exc})") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}:1: expected header with format_version {FORMAT_VERSION}")
    image_dim = image_dim or header.get("image_dim")
    text_dim = text_dim or header.get("text_dim")

    samples, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = str(rec["id"])
            img = np.asarray(rec["image_features"], dtype=np.float64)
            txt = np.asarray(rec["text_features"], dtype=np.float64)
            label = int(rec["label"])
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc!r})") from exc
        if image_dim is None:
            image_dim, text_dim = img.size, txt.size
        if img.ndim != 1 or txt.ndim != 1 or img.size != image_dim or txt.size != text_dim:
            raise DatasetFormatError(
                f"{path}:{lineno}: dimension mismatch (got {img.size}/{txt.size}, "
                f"expected {image_dim}/{text_dim})")
        values = {}
        for name, levels in schema.attributes:
            if name not in rec:
                raise DatasetFormatError(f"{path}:{lineno}: missing attribute {name!r}")
            if rec[name] not in levels:
                raise DatasetFormatError(
                    f"{path}:{lineno}: unknown level {rec[name]!r} for attribute {name!r}")
            values[name] = levels.index(rec[name])
        if sid in seen:
            raise DatasetFormatError(f"{path}:{lineno}: duplicate id {sid!r}")
        seen.add(sid)
        try:
            samples.append(Sample(sid, img, txt, label, values))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    if image_dim is None:
        raise DatasetFormatError(f"{path}: no records and no dims in header")
    return Dataset(schema, tuple(samples), int(image_dim), int(text_dim))


# ---------------------------------------------------------------- partitions & sampling


def partition_by_attribute(ds: Dataset, attribute_name: str) -> GroupPartition:
    levels = ds.schema.levels(attribute_name)
    groups: dict[int, list[int]] = {k: [] for k in range(len(levels))}
    for i, s in enumerate(ds.samples):
        groups[s.attribute_values[attribute_name]].append(i)
    return GroupPartition(attribute_name, groups)


def sample_batch(ds: Dataset, spec: BatchSpec, rng: np.random.Generator) -> list[int]:
    """Uniform batch; without replacement unless the batch exceeds the dataset."""
    n = len(ds)
    if n == 0:
        raise ValueError("cannot sample from an empty dataset")
    replace = spec.batch_size > n
    return rng.choice(n, size=spec.batch_size, replace=replace).tolist()


def sample_group_batch(part: GroupPartition, level: int, size: int,
                       rng: np.random.Generator) -> list[int]:
    members = part.groups.get(level, [])
    if not members:
        raise ValueError(f"group {level} of attribute {part.attribute_name!r} is empty")
    if size < 1:
        raise ValueError("size must be positive")
    picks = rng.choice(len(members), size=size, replace=size > len(members))
    return [members[i] for i in picks]


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
