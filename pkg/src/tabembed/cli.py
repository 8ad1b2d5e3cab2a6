"""Command-line entry point: ``tabembed {train,param-report,precompute,sweep,synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint, save_precomputed
from .data import Dataset, FeatureSchema, Kind
from .embed_cat import CatMethod
from .embed_num import NumMethod
from .errors import ConfigError, DataError, TabEmbedError
from .model import ModelConfig, TabularModel
from .train import SWEEP_AXES, TrainConfig, sweep, train_model

log = logging.getLogger("tabembed")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
SEED_ENV = "DTE_SEED"


@dataclass
class RunConfig:
    """Everything one command needs; built from a config file plus flag overrides."""

    data: str | None = None
    schema: str | None = None
    synth: str | None = None
    n: int = 10000
    v: int = 1000
    methods: list[str] = field(default_factory=list)
    d: int = 8
    dhat: int | None = None
    layers: int = 2
    width: int = 500
    cap: float = 1.0
    lr: float = 1e-3
    batch: int = 1024
    patience: int = 5
    seeds: int = 5
    max_epochs: int = 200
    seed: int = 0
    out: str = "."

    def validate(self) -> None:
        if self.synth is None and self.data is None:
            raise ConfigError("one of --data or --synth is required")
        if self.synth is not None and self.data is not None:
            raise ConfigError("--data and --synth are mutually exclusive")
        if self.synth not in (None, "numeric", "categorical"):
            raise ConfigError(f"--synth must be 'numeric' or 'categorical', got {self.synth!r}")
        if self.data is not None and self.schema is None:
            raise ConfigError("--schema is required with --data")
        for name in ("n", "v", "d", "layers", "width", "seeds", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"--{name.replace('_', '-')} must be positive, got {getattr(self, name)}")
        if self.dhat is not None and not 1 <= self.dhat < self.d:
            raise ConfigError(f"--dhat must satisfy 1 <= dhat < d, got {self.dhat} with d={self.d}")
        if not self.cap > 0:
            raise ConfigError(f"--cap must be positive, got {self.cap}")
        if not self.lr > 0:
            raise ConfigError(f"--lr must be positive, got {self.lr}")
        if self.batch < 0:
            raise ConfigError(f"--batch must be >= 0, got {self.batch}")
        if self.patience < 0:
            raise ConfigError(f"--patience must be >= 0, got {self.patience}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seeds=tuple(self.seed + i for i in range(self.seeds)),
        )

    def model_config(self, schema: FeatureSchema) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            id_dim=self.dhat,
            depth=self.layers,
            width=self.width,
            cap=self.cap,
            methods=resolve_methods(self.methods, schema),
        )


_INT_KEYS = {"n", "v", "d", "dhat", "layers", "width", "batch", "patience", "seeds", "max_epochs", "seed"}
_FLOAT_KEYS = {"cap", "lr"}


def _coerce(key: str, value: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``method`` may repeat."""
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "method":
            values.setdefault("methods", []).append(value)
            continue
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def resolve_methods(specs: list[str], schema: FeatureSchema) -> dict[str, str]:
    """Expand ``--method`` entries into a per-field assignment.

    ``field=m`` sets one field, ``numerical=m`` / ``categorical=m`` a whole
    kind, and a bare ``m`` every field whose kind supports it.  Later
    entries win; unassigned fields default to ``deep``.
    """
    num_ok = {m.value for m in NumMethod}
    cat_ok = {m.value for m in CatMethod}
    methods = {f.name: "deep" for f in schema.fields}

    def valid(spec, m):
        ok = num_ok if spec.kind is Kind.NUMERICAL else cat_ok
        if m not in ok:
            raise ConfigError(f"--method: {m!r} is not a {spec.kind.value} method for field {spec.name!r}")

    for entry in specs:
        if "=" in entry:
            target, m = (s.strip() for s in entry.split("=", 1))
            if target in ("numerical", "categorical") and target not in schema.names:
                for spec in schema.fields:
                    if spec.kind.value == target:
                        valid(spec, m)
                        methods[spec.name] = m
                continue
            if target not in methods:
                raise ConfigError(f"--method: unknown field {target!r}")
            valid(schema.field(target), m)
            methods[target] = m
        else:
            m = entry.strip()
            if m not in num_ok | cat_ok:
                raise ConfigError(f"--method: unknown embedding method {m!r}")
            for spec in schema.fields:
                if m in (num_ok if spec.kind is Kind.NUMERICAL else cat_ok):
                    methods[spec.name] = m
    return methods


def load_dataset(cfg: RunConfig) -> Dataset:
    """Build, split (seeded by the master seed) and normalize the dataset."""
    if cfg.synth == "numeric":
        ds = D.split(D.synth_numeric(cfg.n, cfg.seed), cfg.seed)
    elif cfg.synth == "categorical":
        ds = D.split(D.synth_categorical(cfg.n, cfg.v, cfg.seed), cfg.seed)
    else:
        ds = D.load_csv(cfg.data, D.load_schema(cfg.schema), seed=cfg.seed)
    return D.normalize(ds)


def _fmt(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def write_csv_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def cmd_train(cfg: RunConfig) -> dict:
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    tc = cfg.train_config()
    report, models = train_model(ds, tc, cfg.model_config(ds.schema), return_models=True)
    best = max(range(len(report.runs)), key=lambda i: (report.runs[i].best_val_auc, -i))
    stamp = save_checkpoint(out / "model.ckpt", models[best], tc.to_dict(), {"vocab": ds.vocab, "stats": ds.stats})
    doc = report.to_dict()
    doc["checkpoint"] = {"file": "model.ckpt", "seed": report.runs[best].seed, "stamp": stamp}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_csv_rows(
        out / "epochs.csv",
        [{"seed": r.seed, **e} for r in report.runs for e in r.epochs],
    )
    print(f"test AUC {report.test_auc_mean:.4f} +/- {report.test_auc_std:.4f} over {len(report.runs)} runs -> {out}")
    return doc


def _schema_for_report(cfg: RunConfig) -> FeatureSchema:
    if cfg.synth == "numeric":
        return D.synth_numeric(100, cfg.seed).schema
    if cfg.synth == "categorical":
        return FeatureSchema((D.FieldSpec("entity", Kind.CATEGORICAL, cfg.v),))
    if cfg.schema is None:
        raise ConfigError("--schema (or --synth) is required")
    schema = D.load_schema(cfg.schema)
    if any(f.cardinality is None for f in schema.categorical):
        if cfg.data is None:
            raise ConfigError("--schema lacks categorical cardinalities; give them in the schema or pass --data")
        schema = D.load_csv(cfg.data, schema).schema
    return schema


def cmd_param_report(cfg: RunConfig) -> list[dict]:
    schema = _schema_for_report(cfg)
    model = TabularModel(schema, cfg.model_config(schema), cfg.seed)
    rows = []
    for r in model.param_report():
        rows.append(
            {
                "field": r["field"],
                "kind": r["kind"],
                "method": r["method"],
                "dim": r["dim"],
                "params": r["params"],
                "extras": ";".join(f"{k}={v}" for k, v in r["extras"].items()),
                "total": r["total"],
            }
        )
    totals = model.param_totals()
    rows.append({"field": "<total>", "kind": "", "method": "", "dim": model.row_width,
                 "params": "", "extras": "", "total": totals["total"]})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv_rows(out / "params.csv", rows)
    widths = {k: max(len(k), *(len(str(r[k])) for r in rows)) for k in rows[0]}
    print("  ".join(k.ljust(w) for k, w in widths.items()))
    for r in rows:
        print("  ".join(str(r[k]).ljust(w) for k, w in widths.items()))
    return rows


def cmd_precompute(checkpoint: str, field_name: str, out: str) -> Path:
    model, _ = load_checkpoint(checkpoint)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{field_name}.table"
    cache = save_precomputed(path, model, field_name)
    print(f"wrote {cache.table.shape[0]} x {cache.table.shape[1]} table for {field_name!r} -> {path}")
    return path


def cmd_sweep(cfg: RunConfig, axis: str, values: list[int]) -> list[dict]:
    cfg.validate()
    if axis not in SWEEP_AXES:
        raise ConfigError(f"--axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    ds = load_dataset(cfg)
    rows = sweep(ds, axis, values, cfg.train_config(), cfg.model_config(ds.schema))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv_rows(out / "sweep.csv", rows)
    for r in rows:
        print(f"{axis}={r[axis]}: AUC {r['mean_auc']:.4f} +/- {r['std_auc']:.4f} ({r['params']} params)")
    return rows


def cmd_synth(kind: str, n: int, v: int, seed: int, out: str) -> Path:
    if kind == "numeric":
        ds = D.synth_numeric(n, seed)
    elif kind == "categorical":
        ds = D.synth_categorical(n, v, seed)
    else:
        raise ConfigError(f"--synth must be 'numeric' or 'categorical', got {kind!r}")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    D.write_csv(ds, out_dir / "data.csv")
    schema = FeatureSchema(
        tuple(dataclasses.replace(f, cardinality=None) for f in ds.schema.fields), ds.schema.label
    )
    (out_dir / "schema.txt").write_text(D.format_schema(schema), encoding="utf-8")
    print(f"wrote {len(ds)} rows -> {out_dir / 'data.csv'}")
    return out_dir


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--data", default=S, help="CSV file with a header row")
    p.add_argument("--schema", default=S, help="schema file (name = kind [normalization])")
    p.add_argument("--synth", default=S, choices=["numeric", "categorical"])
    p.add_argument("--n", type=int, default=S, help="synthetic row count")
    p.add_argument("--v", type=int, default=S, help="synthetic categorical cardinality")
    p.add_argument("--method", dest="methods", action="append", default=S,
                   help="field=method, kind=method, or a bare method for all fields (repeatable)")
    p.add_argument("--d", type=int, default=S, help="embedding size")
    p.add_argument("--dhat", type=int, default=S, help="identification vector size (< d)")
    p.add_argument("--layers", type=int, default=S, help="numerical deep-transform depth")
    p.add_argument("--width", type=int, default=S, help="numerical deep-transform hidden width")
    p.add_argument("--cap", type=float, default=S, help="ExU activation cap")
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--batch", type=int, default=S, help="batch size; 0 for full batch")
    p.add_argument("--patience", type=int, default=S)
    p.add_argument("--seeds", type=int, default=S, help="number of independent runs")
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=S)
    p.add_argument("--seed", type=int, default=S, help=f"master seed (fallback: ${SEED_ENV})")
    p.add_argument("--out", default=S, help="output directory")


def build_config(ns: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if os.environ.get(SEED_ENV):
        values["seed"] = _coerce("seed", os.environ[SEED_ENV])
    if getattr(ns, "config", None):
        values.update(read_config_file(ns.config))
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in vars(ns).items():
        if key in known:
            values[key] = value
    return RunConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabembed", description="Train and inspect deep feature embeddings for tabular data.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("train", help="train and evaluate over seeds"))
    _add_run_flags(sub.add_parser("param-report", help="per-field parameter accounting"))

    p = sub.add_parser("precompute", help="materialize a deep categorical field's table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", default=".")

    p = sub.add_parser("sweep", help="sweep depth or embedding size")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated integers")

    p = sub.add_parser("synth", help="write a synthetic dataset and its schema")
    p.add_argument("--synth", required=True, choices=["numeric", "categorical"])
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--v", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=".")
    return parser


def _parse_values(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, got {text!r}") from None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(ns.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if ns.command == "train":
            cmd_train(build_config(ns))
        elif ns.command == "param-report":
            cmd_param_report(build_config(ns))
        elif ns.command == "precompute":
            cmd_precompute(ns.checkpoint, ns.field, ns.out)
        elif ns.command == "sweep":
            cmd_sweep(build_config(ns), ns.axis, _parse_values(ns.values))
        elif ns.command == "synth":
            seed = ns.seed if ns.seed is not None else int(os.environ.get(SEED_ENV, 0))
            cmd_synth(ns.synth, ns.n, ns.v, seed, ns.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TabEmbedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
