"""Categorical feature embeddings and the precomputed-table cache.

Entities of a field with cardinality ``v`` are indexed ``0 .. v-1``; index
``v`` is reserved for values never seen in training.  Learned tables carry
one extra row for it, reported separately from the table formulas.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError, OutOfVocabularyError, StaleCacheError
from .layers import DEFAULT_CAP, FFN, build_ffn, ffn_param_count

log = logging.getLogger(__name__)


class CatMethod(str, enum.Enum):
    ONEHOT = "onehot"
    BINARY = "binary"
    LOOKUP = "lookup"
    HASHING = "hashing"
    DEEP = "deep"

    @classmethod
    def parse(cls, value) -> "CatMethod":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown categorical embedding method {value!r}") from None


DEFAULT_HASHES = 2
DEFAULT_HASH_BUCKETS = 256


def default_id_dim(d: int) -> int:
    return max(2, d // 8)


def check_index(x, v: int) -> np.ndarray:
    idx = np.asarray(x)
    if idx.dtype.kind not in "iu":
        if not np.all(np.mod(idx, 1) == 0):
            raise OutOfVocabularyError(f"categorical index must be integral, got {x!r}")
        idx = idx.astype(np.int64)
    if np.any(idx < 0) or np.any(idx > v):
        bad = idx[(idx < 0) | (idx > v)].ravel()[0]
        raise OutOfVocabularyError(f"index {int(bad)} outside vocabulary 0..{v - 1} (+ reserved {v})")
    return idx.astype(np.int64)


def binary_width(v: int) -> int:
    return max(1, math.ceil(math.log2(v)))


def onehot_encode(x, v: int) -> Tensor:
    """Width-``v`` indicator; the reserved index maps to the zero vector."""
    idx = check_index(x, v)
    eye = np.vstack([np.eye(v), np.zeros((1, v))])
    return Tensor(eye[idx])


def binary_encode(x, v: int) -> Tensor:
    """Most-significant-bit-first base-2 digits over ``ceil(log2 v)`` positions.

    The reserved index ``v`` wraps modulo ``2**width`` when it does not fit.
    """
    idx = check_index(x, v)
    width = binary_width(v)
    shifts = np.arange(width - 1, -1, -1)
    bits = (idx[..., None] % (1 << width)) >> shifts & 1
    return Tensor(bits.astype(np.float64))


# --- deep factorization ------------------------------------------------------

@dataclass
class IdTable:
    """Compact ``(v + 1) x d_hat`` identification table (last row reserved)."""

    entries: Tensor

    @classmethod
    def create(cls, v: int, id_dim: int, rng: np.random.Generator, prefix: str = "") -> "IdTable":
        if v < 1 or id_dim < 1:
            raise ConfigError(f"IdTable needs v >= 1 and d_hat >= 1, got {v}, {id_dim}")
        return cls(Tensor(rng.normal(0.0, 1.0, (v + 1, id_dim)), True, prefix + "E"))

    @property
    def cardinality(self) -> int:
        return self.entries.shape[0] - 1

    @property
    def id_dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class CatDeepParams:
    """Shared FFN ``d_hat -> hidden... -> d`` with ExU hidden layers and a linear output."""

    ffn: FFN

    @classmethod
    def create(
        cls,
        id_dim: int,
        d: int,
        rng: np.random.Generator,
        hidden: list[int] | None = None,
        cap: float = DEFAULT_CAP,
        prefix: str = "",
    ) -> "CatDeepParams":
        widths = cat_deep_widths(id_dim, d, hidden)
        return cls(build_ffn(widths, rng, linear_output=True, cap=cap, prefix=prefix))

    def parameters(self) -> list[Tensor]:
        return self.ffn.parameters()


def cat_deep_widths(id_dim: int, d: int, hidden: list[int] | None = None) -> list[int]:
    hidden = [d] if hidden is None else list(hidden)
    if id_dim < 1 or d < 1 or any(h < 1 for h in hidden):
        raise ConfigError(f"invalid categorical FFN widths {[id_dim, *hidden, d]}")
    return [id_dim, *hidden, d]


def identify(x, table: IdTable) -> Tensor:
    return dc.gather_rows(table.entries, check_index(x, table.cardinality))


def deep_transform_cat(xhat: Tensor, params: CatDeepParams) -> Tensor:
    xhat = dc.as_tensor(xhat)
    widths = params.ffn.widths()
    if xhat.shape[-1:] != (widths[0],):
        raise ConfigError(f"deep transform expects input width {widths[0]}, got {xhat.shape}")
    return params.ffn(xhat)


# --- hashing -----------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def hash_buckets(x, seed: int, buckets: int) -> np.ndarray:
    """Seeded 64-bit mix, then multiply-shift range reduction to ``[0, buckets)``."""
    z = _mix64(np.asarray(x, dtype=np.uint64) ^ np.uint64(seed))
    with np.errstate(over="ignore"):
        return ((z >> np.uint64(32)) * np.uint64(buckets) >> np.uint64(32)).astype(np.int64)


@dataclass
class HashingConfig:
    tables: list[Tensor]
    agg_weights: Tensor
    seeds: list[int]

    @classmethod
    def create(
        cls,
        k: int,
        bucket_count: int,
        d: int,
        rng: np.random.Generator,
        master_seed: int = 0,
        prefix: str = "",
    ) -> "HashingConfig":
        if k < 1 or bucket_count < 1:
            raise ConfigError(f"hashing needs k >= 1 and buckets >= 1, got {k}, {bucket_count}")
        seeds = np.random.SeedSequence(master_seed).generate_state(k, dtype=np.uint64)
        tables = [Tensor(rng.normal(0.0, 1.0, (bucket_count, d)), True, f"{prefix}T{t}") for t in range(k)]
        return cls(tables, Tensor(np.zeros(k), True, prefix + "agg"), [int(s) for s in seeds])

    @property
    def k(self) -> int:
        return len(self.tables)

    @property
    def bucket_count(self) -> int:
        return self.tables[0].shape[0]

    def buckets(self, x) -> list[np.ndarray]:
        return [hash_buckets(x, s, self.bucket_count) for s in self.seeds]

    def parameters(self) -> list[Tensor]:
        return [*self.tables, self.agg_weights]


def hash_embed(x, cfg: HashingConfig) -> Tensor:
    idx = np.asarray(x, dtype=np.int64)
    rows = [dc.gather_rows(t, b) for t, b in zip(cfg.tables, cfg.buckets(idx))]
    stacked = dc.stack(rows, axis=0)
    w = dc.reshape(dc.softmax(cfg.agg_weights), (cfg.k,) + (1,) * (stacked.data.ndim - 1))
    return dc.tsum(stacked * w, axis=0)


# --- parameter accounting ----------------------------------------------------

def param_count_categorical(
    method,
    v: int,
    d: int,
    d_hat: int | None = None,
    k: int = DEFAULT_HASHES,
    v_hat: int = DEFAULT_HASH_BUCKETS,
    hidden: list[int] | None = None,
) -> int:
    """Table-formula parameter count for one categorical field.

    Reserved out-of-vocabulary rows and hash aggregation weights are left
    to :func:`categorical_param_extras`.
    """
    method = CatMethod.parse(method)
    if min(v, d, k, v_hat) < 1:
        raise ConfigError("parameter counts need positive dimensions")
    if method in (CatMethod.ONEHOT, CatMethod.BINARY):
        return 0
    if method is CatMethod.LOOKUP:
        return v * d
    if method is CatMethod.HASHING:
        return k * v_hat * d
    d_hat = default_id_dim(d) if d_hat is None else d_hat
    return v * d_hat + ffn_param_count(cat_deep_widths(d_hat, d, hidden), linear_output=True)


def categorical_param_extras(method, d: int, d_hat: int | None = None, k: int = DEFAULT_HASHES) -> dict[str, int]:
    method = CatMethod.parse(method)
    if method is CatMethod.LOOKUP:
        return {"oov_row": d}
    if method is CatMethod.HASHING:
        return {"agg_weights": k}
    if method is CatMethod.DEEP:
        return {"oov_row": default_id_dim(d) if d_hat is None else d_hat}
    return {}


def categorical_dim(method, v: int, d: int) -> int:
    method = CatMethod.parse(method)
    if method is CatMethod.ONEHOT:
        return v
    if method is CatMethod.BINARY:
        return binary_width(v)
    return d


# --- embedder + cache --------------------------------------------------------

class CategoricalEmbedder:
    """Embeds one categorical field of cardinality ``v`` with a chosen method."""

    def __init__(
        self,
        method,
        v: int,
        d: int,
        rng: np.random.Generator | None = None,
        id_dim: int | None = None,
        hidden: list[int] | None = None,
        k: int = DEFAULT_HASHES,
        v_hat: int = DEFAULT_HASH_BUCKETS,
        hash_seed: int = 0,
        cap: float = DEFAULT_CAP,
        prefix: str = "",
    ):
        self.method = CatMethod.parse(method)
        if v < 1 or d < 1:
            raise ConfigError(f"need v >= 1 and d >= 1, got v={v}, d={d}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.v, self.d = v, d
        self.id_dim = default_id_dim(d) if id_dim is None else id_dim
        self.hidden = [d] if hidden is None else list(hidden)
        self.k, self.v_hat = k, v_hat
        self.table: Tensor | None = None
        self.id_table: IdTable | None = None
        self.deep: CatDeepParams | None = None
        self.hashing: HashingConfig | None = None
        self.cache: PrecomputedCache | None = None
        m = self.method
        if m is CatMethod.LOOKUP:
            self.table = Tensor(rng.normal(0.0, 1.0, (v + 1, d)), True, prefix + "table")
        elif m is CatMethod.HASHING:
            self.hashing = HashingConfig.create(k, v_hat, d, rng, hash_seed, prefix)
        elif m is CatMethod.DEEP:
            if not 1 <= self.id_dim < d:
                raise ConfigError(f"deep factorization needs 1 <= d_hat < d, got d_hat={self.id_dim}, d={d}")
            self.id_table = IdTable.create(v, self.id_dim, rng, prefix)
            self.deep = CatDeepParams.create(self.id_dim, d, rng, self.hidden, cap, prefix)

    @property
    def dim(self) -> int:
        return categorical_dim(self.method, self.v, self.d)

    def __call__(self, x) -> Tensor:
        m = self.method
        if m is CatMethod.ONEHOT:
            return onehot_encode(x, self.v)
        if m is CatMethod.BINARY:
            return binary_encode(x, self.v)
        idx = check_index(x, self.v)
        if m is CatMethod.LOOKUP:
            return dc.gather_rows(self.table, idx)
        if m is CatMethod.HASHING:
            return hash_embed(idx, self.hashing)
        if self.cache is not None and not dc.is_grad_enabled():
            return Tensor(self.cache.fetch(idx, self))
        return self.compute(idx)

    def compute(self, idx) -> Tensor:
        """On-the-fly deep embedding, bypassing any cache."""
        return deep_transform_cat(identify(idx, self.id_table), self.deep)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        ps: list[Tensor] = []
        if self.table is not None:
            ps.append(self.table)
        if self.hashing is not None:
            ps += self.hashing.parameters()
        if self.id_table is not None:
            ps += [self.id_table.entries, *self.deep.parameters()]
        return [(p.name, p) for p in ps]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def version_stamp(self) -> tuple[int, ...]:
        return tuple(p.version for p in self.parameters())

    def content_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def param_count(self) -> int:
        return param_count_categorical(self.method, self.v, self.d, self.id_dim, self.k, self.v_hat, self.hidden)

    def param_extras(self) -> dict[str, int]:
        return categorical_param_extras(self.method, self.d, self.id_dim, self.k)

    def precompute(self) -> "PrecomputedCache":
        return precompute_table(self)


def embed_categorical(x, embedder: CategoricalEmbedder) -> Tensor:
    return embedder(x)


@dataclass
class PrecomputedCache:
    """Materialized deep embeddings for entities ``0 .. v-1``.

    Rows fill either all at once (:func:`precompute_table`) or lazily on
    first fetch.  A fetch after the embedder's parameters have changed
    rebuilds the filled rows.
    """

    table: np.ndarray
    filled: np.ndarray
    stamp: tuple[int, ...]
    digest: str = ""
    hits: int = 0
    misses: int = 0
    rebuilds: int = field(default=0)

    @classmethod
    def empty(cls, embedder: CategoricalEmbedder) -> "PrecomputedCache":
        if embedder.method is not CatMethod.DEEP:
            raise ConfigError(f"caching applies to the deep method only, not {embedder.method.value}")
        return cls(
            np.zeros((embedder.v, embedder.d)),
            np.zeros(embedder.v, dtype=bool),
            embedder.version_stamp(),
            embedder.content_digest(),
        )

    def is_stale(self, embedder: CategoricalEmbedder) -> bool:
        return self.stamp != embedder.version_stamp()

    def check(self, embedder: CategoricalEmbedder) -> None:
        if self.is_stale(embedder):
            raise StaleCacheError("precomputed table is stale: embedder parameters changed")

    def fetch(self, x, embedder: CategoricalEmbedder) -> np.ndarray:
        idx = check_index(x, embedder.v)
        if self.is_stale(embedder):
            log.info("embedding cache stale; recomputing %d rows", int(self.filled.sum()))
            self.rebuilds += 1
            self.stamp = embedder.version_stamp()
            self.digest = embedder.content_digest()
            rows = np.flatnonzero(self.filled)
            if len(rows):
                with dc.no_grad():
                    self.table[rows] = embedder.compute(rows).data
        flat = idx.ravel()
        known = flat < embedder.v
        hit = np.zeros_like(known)
        hit[known] = self.filled[flat[known]]
        self.hits += int(hit.sum())
        self.misses += int((~hit).sum())
        out = np.empty((len(flat), embedder.d))
        out[hit] = self.table[flat[hit]]
        if (~hit).any():
            with dc.no_grad():
                out[~hit] = embedder.compute(flat[~hit]).data
            new = flat[~hit & known]
            self.table[new] = out[~hit & known]
            self.filled[new] = True
        return out.reshape(idx.shape + (embedder.d,))


def precompute_table(embedder: CategoricalEmbedder) -> PrecomputedCache:
    """Materialize the full ``v x d`` table from the current (frozen) parameters."""
    cache = PrecomputedCache.empty(embedder)
    with dc.no_grad():
        cache.table[:] = embedder.compute(np.arange(embedder.v)).data
    cache.filled[:] = True
    return cache
