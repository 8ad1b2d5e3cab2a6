"""Self-describing binary containers for model parameters and precomputed tables.

Layout: an 8-byte magic, an unsigned 64-bit little-endian header length,
a UTF-8 JSON header, then every array as raw little-endian float64 in
header order.  Values round-trip bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .data import FeatureSchema
from .embed_cat import CatMethod, PrecomputedCache
from .errors import ConfigError, DataError, StaleCacheError
from .model import ModelConfig, TabularModel

MAGIC = b"TBEMBCK1"
FORMAT_VERSION = 1


def _digest(arrays: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def write_container(path: str | Path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a tabembed container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    offset = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated data for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    return header, arrays


def model_stamp(model: TabularModel) -> str:
    return _digest([p.data for p in model.parameters()])


def save_checkpoint(path, model: TabularModel, train_config: dict | None = None, extra: dict | None = None) -> str:
    """Write every parameter plus the schema and configs; returns the parameter stamp."""
    stamp = model_stamp(model)
    header = {
        "kind": "checkpoint",
        "schema": model.schema.to_dict(),
        "model_config": model.config.to_dict(),
        "train_config": train_config or {},
        "seed": model.seed,
        "stamp": stamp,
        "field_stamps": {
            spec.name: emb.content_digest()
            for spec, emb in zip(model.fields, model.embedders)
            if hasattr(emb, "content_digest")
        },
    }
    if extra:
        header.update(extra)
    write_container(path, header, [(n, p.data) for n, p in model.named_parameters()])
    return stamp


def load_checkpoint(path) -> tuple[TabularModel, dict]:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise DataError(f"{path}: not a model checkpoint")
    model = TabularModel(
        FeatureSchema.from_dict(header["schema"]),
        ModelConfig.from_dict(header["model_config"]),
        header["seed"],
    )
    model.load_state_dict(arrays)
    if model_stamp(model) != header["stamp"]:
        raise DataError(f"{path}: parameter stamp mismatch (corrupt file?)")
    return model, header


def save_precomputed(path, model: TabularModel, field: str) -> PrecomputedCache:
    emb = model.embedder(field)
    if getattr(emb, "method", None) is not CatMethod.DEEP:
        raise ConfigError(f"field {field!r} does not use the deep categorical method")
    cache = emb.precompute()
    header = {
        "kind": "precomputed",
        "field": field,
        "stamp": cache.digest,
        "checkpoint_stamp": model_stamp(model),
    }
    write_container(path, header, [("table", cache.table)])
    return cache


def load_precomputed(path, model: TabularModel) -> PrecomputedCache:
    """Load a table and attach it to its field; rejects tables from other parameters."""
    header, arrays = read_container(path)
    if header.get("kind") != "precomputed":
        raise DataError(f"{path}: not a precomputed table")
    emb = model.embedder(header["field"])
    if getattr(emb, "method", None) is not CatMethod.DEEP:
        raise ConfigError(f"field {header['field']!r} does not use the deep categorical method")
    if emb.content_digest() != header["stamp"]:
        raise StaleCacheError(
            f"{path}: table for {header['field']!r} was built from different parameters; re-run precompute"
        )
    table = arrays["table"]
    cache = PrecomputedCache(table.copy(), np.ones(len(table), dtype=bool), emb.version_stamp(), header["stamp"])
    emb.cache = cache
    return cache
