"""Per-field embeddings assembled into a row and scored by a small FFN."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import FeatureSchema, Kind
from .diffcore import Tensor
from .embed_cat import CatMethod, CategoricalEmbedder
from .embed_num import DEFAULT_BUCKETS, DEFAULT_DEPTH, DEFAULT_WIDTH, NumericalEmbedder, NumMethod
from .errors import ConfigError, SchemaError
from .layers import DEFAULT_CAP

BACKBONE_HIDDEN = (64, 64)


@dataclass
class ModelConfig:
    """Embedding and backbone hyperparameters.

    ``methods`` maps field names to method names; unlisted fields use
    ``deep``.  ``id_dim=None`` means ``max(2, d // 8)``.
    """

    d: int = 8
    id_dim: int | None = None
    depth: int = DEFAULT_DEPTH
    width: int = DEFAULT_WIDTH
    cap: float = DEFAULT_CAP
    buckets: int = DEFAULT_BUCKETS
    temperature: float = 1.0
    k: int = 2
    v_hat: int = 256
    cat_hidden: list[int] | None = None
    backbone: tuple[int, ...] = BACKBONE_HIDDEN
    methods: dict[str, str] = field(default_factory=dict)

    def method_for(self, spec) -> str:
        return self.methods.get(spec.name, "deep")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone"] = list(self.backbone)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = tuple(d.get("backbone", BACKBONE_HIDDEN))
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class BackboneParams:
    """Hidden ReLU layers then one output logit."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def create(cls, d_in: int, hidden: tuple[int, ...], rng: np.random.Generator) -> "BackboneParams":
        widths = [d_in, *hidden, 1]
        ws, bs = [], []
        for i in range(len(widths) - 1):
            ws.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / widths[i]), (widths[i + 1], widths[i])), True, f"backbone.W{i}"))
            bs.append(Tensor(np.zeros(widths[i + 1]), True, f"backbone.b{i}"))
        return cls(ws, bs)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def backbone_param_count(d_in: int, hidden: tuple[int, ...] = BACKBONE_HIDDEN) -> int:
    widths = [d_in, *hidden, 1]
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))


def forward(row: Tensor, params: BackboneParams) -> Tensor:
    """Probability for each flattened embedded row (``(w,)`` or ``(n, w)``)."""
    if row.shape[-1] != params.d_in:
        raise ConfigError(f"backbone expects width {params.d_in}, got {row.shape[-1]}")
    return dc.sigmoid(logits(row, params))


def logits(row: Tensor, params: BackboneParams) -> Tensor:
    h = row
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = dc.affine(h, W, b)
        if i < last:
            h = dc.relu(h)
    return dc.reshape(h, h.shape[:-1])


class TabularModel:
    """Embedders for every schema field plus the backbone.

    Fields are embedded numerical-first, then categorical, each block in
    schema order; the per-field vectors are concatenated.
    """

    def __init__(self, schema: FeatureSchema, config: ModelConfig | None = None, seed: int = 0):
        self.schema = schema
        self.config = config = config or ModelConfig()
        self.seed = seed
        unknown = set(config.methods) - set(schema.names)
        if unknown:
            raise ConfigError(f"methods given for unknown fields: {sorted(unknown)}")
        rng = np.random.default_rng(seed)
        self.embedders: list[NumericalEmbedder | CategoricalEmbedder] = []
        for spec in schema.ordered:
            method = config.method_for(spec)
            prefix = f"{spec.name}."
            if spec.kind is Kind.NUMERICAL:
                emb = NumericalEmbedder(
                    method, config.d, rng, config.depth, config.width,
                    config.buckets, config.temperature, config.cap, prefix,
                )
            else:
                if spec.cardinality is None:
                    raise SchemaError(f"categorical field {spec.name!r} has no cardinality")
                emb = CategoricalEmbedder(
                    method, spec.cardinality, config.d, rng, config.id_dim, config.cat_hidden,
                    config.k, config.v_hat, hash_seed=seed, cap=config.cap, prefix=prefix,
                )
            self.embedders.append(emb)
        self.backbone = BackboneParams.create(self.row_width, tuple(config.backbone), rng)

    @property
    def fields(self):
        return self.schema.ordered

    @property
    def row_width(self) -> int:
        return sum(e.dim for e in self.embedders)

    def embedder(self, name: str):
        for spec, emb in zip(self.fields, self.embedders):
            if spec.name == name:
                return emb
        raise SchemaError(f"no field named {name!r}")

    def embed_fields(self, num: np.ndarray, cat: np.ndarray) -> list[Tensor]:
        num = np.asarray(num, dtype=np.float64)
        cat = np.asarray(cat)
        M, N = len(self.schema.numerical), len(self.schema.categorical)
        if num.shape[-1:] != (M,) or cat.shape[-1:] != (N,):
            raise SchemaError(
                f"expected {M} numerical and {N} categorical values, got {num.shape} and {cat.shape}"
            )
        out = [emb(num[..., i]) for i, emb in enumerate(self.embedders[:M])]
        out += [emb(cat[..., j]) for j, emb in enumerate(self.embedders[M:])]
        return out

    def embed_row(self, num, cat) -> Tensor:
        """Concatenated embedding of one row or a batch of rows."""
        return dc.concat(self.embed_fields(num, cat), axis=-1)

    def embed_matrix(self, num, cat) -> Tensor:
        """The ``(M+N) x d`` field matrix; all fields must share width ``d``."""
        parts = self.embed_fields(num, cat)
        widths = {p.shape[-1] for p in parts}
        if len(widths) != 1:
            raise ConfigError(f"field widths differ ({sorted(widths)}); use embed_row instead")
        return dc.stack(parts, axis=-2)

    def logits(self, num, cat) -> Tensor:
        return logits(self.embed_row(num, cat), self.backbone)

    def predict_proba(self, num, cat) -> Tensor:
        return forward(self.embed_row(num, cat), self.backbone)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [np_ for emb in self.embedders for np_ in emb.named_parameters()]
        out += [(p.name, p) for p in self.backbone.parameters()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def allocated_scalars(self) -> int:
        return sum(p.size for p in self.parameters())

    def param_report(self) -> list[dict]:
        """Per-field rows: method, width, formula count and itemized extras."""
        rows = []
        for spec, emb in zip(self.fields, self.embedders):
            extras = emb.param_extras()
            rows.append(
                {
                    "field": spec.name,
                    "kind": spec.kind.value,
                    "method": emb.method.value,
                    "dim": emb.dim,
                    "params": emb.param_count(),
                    "extras": extras,
                    "total": emb.param_count() + sum(extras.values()),
                }
            )
        bb = self.backbone.param_count()
        rows.append(
            {"field": "<backbone>", "kind": "", "method": "ffn", "dim": 1, "params": bb, "extras": {}, "total": bb}
        )
        return rows

    def param_totals(self) -> dict[str, int]:
        rows = self.param_report()
        emb = sum(r["total"] for r in rows[:-1])
        return {"embedding": emb, "backbone": rows[-1]["total"], "total": emb + rows[-1]["total"]}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            p.assign(state[name])


def method_names(kind: Kind) -> list[str]:
    enum_cls = NumMethod if kind is Kind.NUMERICAL else CatMethod
    return [m.value for m in enum_cls]
