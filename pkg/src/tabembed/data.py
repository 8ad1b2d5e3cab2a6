"""Tabular dataset ingestion, normalization, splitting and synthetic tasks."""
from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


class Kind(str, enum.Enum):
    NUMERICAL = "numerical"
    CATEGORICAL = "categorical"


class Normalization(str, enum.Enum):
    MINMAX = "minmax"
    ZSCORE = "zscore"


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: Kind
    cardinality: int | None = None
    normalization: Normalization = Normalization.MINMAX

    @property
    def is_numerical(self) -> bool:
        return self.kind is Kind.NUMERICAL


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered fields; numerical fields come first, as in the feature vector layout."""

    fields: tuple[FieldSpec, ...]
    label: str = "label"

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in schema: {names}")
        if self.label in names:
            raise SchemaError(f"label column {self.label!r} is also declared as a feature")
        for f in self.fields:
            if f.kind is Kind.CATEGORICAL and f.cardinality is not None and f.cardinality < 2:
                raise SchemaError(f"categorical field {f.name!r} needs cardinality >= 2, got {f.cardinality}")

    @property
    def numerical(self) -> list[FieldSpec]:
        return [f for f in self.fields if f.kind is Kind.NUMERICAL]

    @property
    def categorical(self) -> list[FieldSpec]:
        return [f for f in self.fields if f.kind is Kind.CATEGORICAL]

    @property
    def ordered(self) -> list[FieldSpec]:
        return self.numerical + self.categorical

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise SchemaError(f"no field named {name!r}")

    def with_cardinalities(self, cards: dict[str, int]) -> "FeatureSchema":
        fields = tuple(
            dataclasses.replace(f, cardinality=cards[f.name]) if f.name in cards else f
            for f in self.fields
        )
        return FeatureSchema(fields, self.label)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "fields": [
                {
                    "name": f.name,
                    "kind": f.kind.value,
                    "cardinality": f.cardinality,
                    "normalization": f.normalization.value,
                }
                for f in self.fields
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            tuple(
                FieldSpec(f["name"], Kind(f["kind"]), f["cardinality"], Normalization(f["normalization"]))
                for f in d["fields"]
            ),
            d.get("label", "label"),
        )


def parse_schema(text: str) -> FeatureSchema:
    """Parse the key-value schema format.

    One field per line, ``name = kind [normalization]``; ``#`` starts a
    comment.  A ``label = <column>`` line names the target column.
    Categorical fields may give a cardinality as ``categorical 12``.
    """
    fields, label = [], "label"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"expected 'name = kind', got {raw!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "label":
            label = value
            continue
        parts = value.split()
        if not key or not parts:
            raise SchemaError(f"incomplete schema entry {raw!r}", lineno)
        try:
            kind = Kind(parts[0])
        except ValueError:
            raise SchemaError(f"unknown kind {parts[0]!r} for field {key!r}", lineno) from None
        norm, card = Normalization.MINMAX, None
        for extra in parts[1:]:
            if kind is Kind.NUMERICAL:
                try:
                    norm = Normalization(extra)
                except ValueError:
                    raise SchemaError(f"unknown normalization {extra!r}", lineno) from None
            elif extra.isdigit():
                card = int(extra)
            else:
                raise SchemaError(f"unexpected token {extra!r} for categorical field", lineno)
        fields.append(FieldSpec(key, kind, card, norm))
    if not fields:
        raise SchemaError("schema declares no fields")
    return FeatureSchema(tuple(fields), label)


def load_schema(path: str | Path) -> FeatureSchema:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


def format_schema(schema: FeatureSchema) -> str:
    lines = [f"label = {schema.label}"]
    for f in schema.fields:
        if f.is_numerical:
            lines.append(f"{f.name} = numerical {f.normalization.value}")
        else:
            lines.append(f"{f.name} = categorical" + (f" {f.cardinality}" if f.cardinality else ""))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Dataset:
    """Numerical values ``(n, M)``, categorical indices ``(n, N)``, labels ``(n,)``.

    Column order follows ``schema.numerical`` and ``schema.categorical``.
    ``split`` holds per-row tags (0 train, 1 val, 2 test) once assigned.
    """

    schema: FeatureSchema
    num: np.ndarray
    cat: np.ndarray
    y: np.ndarray
    split: np.ndarray | None = None
    vocab: dict[str, list[str]] = field(default_factory=dict)
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.y)
        if self.num.shape != (n, len(self.schema.numerical)):
            raise SchemaError(f"numerical block {self.num.shape} does not match schema")
        if self.cat.shape != (n, len(self.schema.categorical)):
            raise SchemaError(f"categorical block {self.cat.shape} does not match schema")
        for j, f in enumerate(self.schema.categorical):
            if f.cardinality is not None and n and (self.cat[:, j].max() > f.cardinality or self.cat[:, j].min() < 0):
                raise DataError(f"field {f.name!r} has indices outside 0..{f.cardinality}")

    def __len__(self) -> int:
        return len(self.y)

    def rows(self, mask_or_idx) -> "Dataset":
        split = None if self.split is None else self.split[mask_or_idx]
        return dataclasses.replace(
            self, num=self.num[mask_or_idx], cat=self.cat[mask_or_idx], y=self.y[mask_or_idx], split=split
        )

    def part(self, name: str) -> "Dataset":
        if self.split is None:
            raise DataError("dataset has no split assigned")
        return self.rows(self.split == SPLIT_NAMES[name])

    @property
    def train_mask(self) -> np.ndarray:
        if self.split is None:
            return np.ones(len(self), dtype=bool)
        return self.split == TRAIN


# --- CSV ingestion ---------------------------------------------------------

def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    rows = []
    for lineno, line in enumerate(lines, 1):
        if '"' in line or "'" in line:
            raise DataError("quoted values are not supported", lineno)
        if lineno == 1 or line.strip():
            rows.append((lineno, [c.strip() for c in line.split(",")]))
    return rows[0][1], rows[1:]


def load_csv(
    path: str | Path,
    schema: FeatureSchema,
    seed: int | None = None,
) -> Dataset:
    """Parse a headered CSV into a :class:`Dataset`.

    Categorical strings are indexed in order of first appearance among
    training rows.  With ``seed`` the 8:1:1 split is assigned first and
    values unseen in training map to the reserved index ``v``; without it,
    every row counts as training.
    """
    path = Path(path)
    header, rows = _read_rows(path)
    cols = {name: i for i, name in enumerate(header)}
    for name in [*schema.names, schema.label]:
        if name not in cols:
            raise SchemaError(f"{path}: missing column {name!r}")
    n = len(rows)
    num = np.zeros((n, len(schema.numerical)))
    y = np.zeros(n)
    raw_cat = [[""] * n for _ in schema.categorical]
    li = cols[schema.label]
    for r, (lineno, cells) in enumerate(rows):
        if len(cells) != len(header):
            raise DataError(f"expected {len(header)} columns, found {len(cells)}", lineno)
        for j, f in enumerate(schema.numerical):
            cell = cells[cols[f.name]]
            try:
                num[r, j] = float(cell)
            except ValueError:
                raise DataError(f"cannot parse {cell!r} as a number in column {f.name!r}", lineno) from None
            if not np.isfinite(num[r, j]):
                raise DataError(f"non-finite value in column {f.name!r}", lineno)
        for j, f in enumerate(schema.categorical):
            raw_cat[j][r] = cells[cols[f.name]]
        label = cells[li]
        if label not in ("0", "1", "0.0", "1.0"):
            raise DataError(f"label must be 0 or 1, got {label!r}", lineno)
        y[r] = float(label)

    tags = assign_split(n, seed) if seed is not None else None
    train = np.ones(n, dtype=bool) if tags is None else tags == TRAIN
    cat = np.zeros((n, len(schema.categorical)), dtype=np.int64)
    vocab, cards = {}, {}
    for j, f in enumerate(schema.categorical):
        mapping: dict[str, int] = {}
        for r in np.flatnonzero(train):
            mapping.setdefault(raw_cat[j][r], len(mapping))
        v = max(len(mapping), 2)
        if len(mapping) < 2:
            log.warning("field %r has %d distinct training values", f.name, len(mapping))
        cat[:, j] = [mapping.get(s, v) for s in raw_cat[j]]
        vocab[f.name] = list(mapping)
        cards[f.name] = v
    return Dataset(schema.with_cardinalities(cards), num, cat, y, tags, vocab)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    schema = dataset.schema
    header = [*(f.name for f in schema.numerical), *(f.name for f in schema.categorical), schema.label]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(dataset)):
            cells = [repr(float(x)) for x in dataset.num[i]]
            cells += [f"e{int(c)}" for c in dataset.cat[i]]
            cells.append(str(int(dataset.y[i])))
            fh.write(",".join(cells) + "\n")


# --- normalization + split -------------------------------------------------

def normalize(dataset: Dataset) -> Dataset:
    """Normalize numerical columns with statistics from the training rows only.

    minmax maps to ``(x - min) / (max - min)``; zscore uses the population
    standard deviation.  Degenerate (constant) columns map to 0.
    """
    train = dataset.num[dataset.train_mask]
    if len(train) == 0:
        raise DataError("cannot normalize: training split is empty")
    out = np.empty_like(dataset.num)
    stats = {}
    for j, f in enumerate(dataset.schema.numerical):
        col = train[:, j]
        if f.normalization is Normalization.MINMAX:
            shift, scale = col.min(), col.max() - col.min()
        else:
            shift, scale = col.mean(), col.std()
        if scale > 0:
            out[:, j] = (dataset.num[:, j] - shift) / scale
        else:
            out[:, j] = 0.0
        stats[f.name] = (float(shift), float(scale))
    return dataclasses.replace(dataset, num=out, stats=stats)


def split_sizes(n: int) -> tuple[int, int, int]:
    if n < 10:
        raise DataError(f"need at least 10 rows to split 8:1:1, got {n}")
    n_val = n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def assign_split(n: int, seed: int) -> np.ndarray:
    n_train, n_val, _ = split_sizes(n)
    perm = np.random.default_rng(seed).permutation(n)
    tags = np.full(n, TEST, dtype=np.int8)
    tags[perm[:n_train]] = TRAIN
    tags[perm[n_train : n_train + n_val]] = VAL
    return tags


def split(dataset: Dataset, seed: int) -> Dataset:
    """Seeded shuffle, then an 8:1:1 partition with the remainder to train."""
    return dataclasses.replace(dataset, split=assign_split(len(dataset), seed))


# --- synthetic tasks -------------------------------------------------------

def numeric_target(x1, x2) -> np.ndarray:
    return np.sin(3 * np.pi * np.asarray(x1)) + 4 * (np.asarray(x2) - 0.5) ** 2 > 0.5


def synth_numeric(n: int, seed: int, noise: float = 0.05) -> Dataset:
    """Two uniform features with a label that is nonlinear in each coordinate."""
    if n < 100:
        raise DataError(f"synth_numeric needs n >= 100, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (n, 2))
    y = numeric_target(x[:, 0], x[:, 1]).astype(np.float64)
    flip = rng.uniform(size=n) < noise
    y[flip] = 1.0 - y[flip]
    schema = FeatureSchema(
        (FieldSpec("x1", Kind.NUMERICAL), FieldSpec("x2", Kind.NUMERICAL))
    )
    return Dataset(schema, x, np.zeros((n, 0), dtype=np.int64), y)


def zipf_probabilities(v: int, s: float = 1.2) -> np.ndarray:
    w = np.arange(1, v + 1, dtype=np.float64) ** -s
    return w / w.sum()


def synth_categorical(
    n: int,
    v: int,
    seed: int,
    s: float = 1.2,
    latent_scale: float = 2.0,
) -> Dataset:
    """One power-law distributed categorical field; entity 0 is the most frequent.

    Each entity draws a latent logit once; labels are Bernoulli of its sigmoid.
    """
    if v < 10:
        raise DataError(f"synth_categorical needs v >= 10, got {v}")
    rng = np.random.default_rng(seed)
    latent = rng.normal(0.0, latent_scale, v)
    ent = rng.choice(v, size=n, p=zipf_probabilities(v, s))
    p = 1.0 / (1.0 + np.exp(-latent[ent]))
    y = (rng.uniform(size=n) < p).astype(np.float64)
    schema = FeatureSchema((FieldSpec("entity", Kind.CATEGORICAL, v),))
    return Dataset(schema, np.zeros((n, 0)), ent.astype(np.int64)[:, None], y)
