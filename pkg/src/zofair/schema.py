"""Attribute schemas, dataset ingestion and the discrimination predicate."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import ModelHandle


class SchemaError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    min: int
    max: int
    protected: bool = False

    def __post_init__(self):
        if self.min > self.max:
            raise SchemaError(f"attribute {self.name!r}: min {self.min} > max {self.max}")

    @property
    def size(self) -> int:
        return self.max - self.min + 1


class DatasetSchema:
    """Ordered attributes with integer domains; some of them protected."""

    def __init__(self, attributes: Sequence[AttributeSpec]):
        attributes = tuple(attributes)
        names = [a.name for a in attributes]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate attribute names: {dupes}")
        if not any(a.protected for a in attributes):
            raise SchemaError("schema needs at least one protected attribute")
        if all(a.protected for a in attributes):
            raise SchemaError("schema needs at least one non-protected attribute")
        self.attributes = attributes
        self.names = names
        self.lower = np.array([a.min for a in attributes], dtype=np.int64)
        self.upper = np.array([a.max for a in attributes], dtype=np.int64)
        self.protected_mask = np.array([a.protected for a in attributes])
        self.protected_indices = tuple(int(i) for i in np.flatnonzero(self.protected_mask))

    def __len__(self):
        return len(self.attributes)

    def __eq__(self, other):
        return isinstance(other, DatasetSchema) and self.attributes == other.attributes

    def to_dict(self) -> dict:
        return {"attributes": [
            {"name": a.name, "min": a.min, "max": a.max, "protected": a.protected}
            for a in self.attributes
        ]}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSchema":
        try:
            attrs = [AttributeSpec(str(a["name"]), int(a["min"]), int(a["max"]),
                                   bool(a.get("protected", False)))
                     for a in data["attributes"]]
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"malformed schema: {exc}") from exc
        return cls(attrs)

    def contains(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all((x >= self.lower) & (x <= self.upper)))


def load_schema(path) -> DatasetSchema:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return DatasetSchema.from_dict(data)


def save_schema(schema: DatasetSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n")


def load_dataset(path, schema: DatasetSchema) -> np.ndarray:
    """Read an integer CSV whose header matches the schema; one row per instance."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != schema.names:
            raise DatasetError(f"header {header} does not match schema {schema.names}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(schema):
                raise DatasetError(f"row {lineno}: expected {len(schema)} cells, got {len(row)}")
            try:
                values = [int(c) for c in row]
            except ValueError:
                raise DatasetError(f"row {lineno}: non-integer cell in {row}") from None
            for j, v in enumerate(values):
                if not schema.lower[j] <= v <= schema.upper[j]:
                    raise DatasetError(
                        f"row {lineno}, column {schema.names[j]!r}: {v} outside "
                        f"[{schema.lower[j]}, {schema.upper[j]}]"
                    )
            rows.append(values)
    return np.array(rows, dtype=np.int64).reshape(len(rows), len(schema))


def write_instances(path, instances, schema: DatasetSchema) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.names)
        for inst in instances:
            writer.writerow([int(v) for v in inst])


def similar_set(x, schema: DatasetSchema) -> np.ndarray:
    """Every protected-value combination except x's own, other attributes copied.

    Rows come in lexicographic order of the protected values.
    """
    x = np.asarray(x, dtype=np.int64)
    idx = list(schema.protected_indices)
    own = tuple(int(x[i]) for i in idx)
    ranges = [range(schema.attributes[i].min, schema.attributes[i].max + 1) for i in idx]
    combos = [c for c in itertools.product(*ranges) if c != own]
    out = np.repeat(x[None, :], len(combos), axis=0)
    if combos:
        out[:, idx] = np.array(combos, dtype=np.int64)
    return out


def clip(x, schema: DatasetSchema) -> np.ndarray:
    x = np.rint(np.asarray(x, dtype=np.float64))
    return np.clip(x, schema.lower, schema.upper).astype(np.int64)


@dataclass(frozen=True)
class DiscriminationWitness:
    instance: tuple
    counterpart: tuple
    labels: tuple


def is_discriminatory(handle: ModelHandle, x, schema: DatasetSchema) -> Optional[DiscriminationWitness]:
    """Check x and all its protected-attribute variants in a single batch."""
    x = np.asarray(x, dtype=np.int64)
    variants = similar_set(x, schema)
    labels = handle.predict(np.vstack([x[None, :], variants])) > 0.5
    differ = np.flatnonzero(labels[1:] != labels[0])
    if differ.size == 0:
        return None
    j = differ[0]
    return DiscriminationWitness(tuple(int(v) for v in x),
                                 tuple(int(v) for v in variants[j]),
                                 (int(labels[0]), int(labels[1 + j])))
