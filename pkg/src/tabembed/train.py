"""Adam, AUC, and the early-stopped multi-seed training protocol."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import diffcore as dc
from .data import Dataset
from .diffcore import Tensor
from .embed_cat import CategoricalEmbedder, CatMethod, PrecomputedCache
from .errors import ConfigError, ContractError, DataError, MetricError
from .model import ModelConfig, TabularModel

log = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam updating :class:`Tensor` values in place."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        dc.zero_grad(self.params)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"adam_step: parameter {p.name or p.shape} has no gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.version += 1


def adam_step(params: Sequence[Tensor], state: Adam) -> None:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("adam_step: state was built for different parameters")
    state.step()


def auc(preds, labels) -> float:
    """Rank-based ROC AUC; tied predictions count one half."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if preds.shape != labels.shape:
        raise DataError(f"auc: {preds.shape} predictions vs {labels.shape} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc is undefined with a single class present")
    ranks = rankdata(preds)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(preds, labels, eps: float = dc.BCE_EPS) -> float:
    p = np.clip(np.asarray(preds, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024  # 0 selects full-batch training
    patience: int = 5
    max_epochs: int = 200
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_batch: int = 8192

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 0:
            raise ConfigError(f"batch size must be >= 0, got {self.batch_size}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = tuple(int(s) for s in self.seeds)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class RunResult:
    seed: int
    epochs: list[dict]
    best_epoch: int
    best_val_auc: float
    restored_val_auc: float
    test_auc: float
    test_logloss: float
    wall_clock_s: float
    cache: dict = field(default_factory=dict)


@dataclass
class TrainReport:
    runs: list[RunResult]
    params: list[dict]
    param_totals: dict[str, int]
    train_config: dict
    model_config: dict
    wall_clock_s: float = 0.0
    cache: dict = field(default_factory=dict)

    @property
    def test_aucs(self) -> list[float]:
        return [r.test_auc for r in self.runs]

    @property
    def test_auc_mean(self) -> float:
        return float(np.mean(self.test_aucs))

    @property
    def test_auc_std(self) -> float:
        return float(np.std(self.test_aucs))

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.runs]

    def to_dict(self) -> dict:
        return {
            "test_auc_mean": self.test_auc_mean,
            "test_auc_std": self.test_auc_std,
            "seeds": self.seeds,
            "runs": [dataclasses.asdict(r) for r in self.runs],
            "params": self.params,
            "param_totals": self.param_totals,
            "train_config": self.train_config,
            "model_config": self.model_config,
            "cache": self.cache,
            "wall_clock_s": self.wall_clock_s,
        }


def predict(model: TabularModel, data: Dataset, chunk: int = 8192) -> np.ndarray:
    out = []
    with dc.no_grad():
        for s in range(0, len(data), chunk):
            out.append(model.predict_proba(data.num[s : s + chunk], data.cat[s : s + chunk]).data)
    return np.concatenate(out) if out else np.zeros(0)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    if batch_size == 0 or batch_size >= n:
        yield order
        return
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def train_epoch(model: TabularModel, opt: Adam, train: Dataset, batch_size: int, rng: np.random.Generator) -> float:
    total, seen = 0.0, 0
    for idx in _batches(len(train), batch_size, rng):
        opt.zero_grad()
        p = model.predict_proba(train.num[idx], train.cat[idx])
        loss = dc.bce_loss(p, Tensor(train.y[idx]))
        dc.backward(loss)
        opt.step()
        total += loss.item() * len(idx)
        seen += len(idx)
    return total / seen


def attach_caches(model: TabularModel) -> dict[str, PrecomputedCache]:
    """Give every deep categorical field a lazily filled embedding cache."""
    caches = {}
    for spec, emb in zip(model.fields, model.embedders):
        if isinstance(emb, CategoricalEmbedder) and emb.method is CatMethod.DEEP:
            emb.cache = caches[spec.name] = PrecomputedCache.empty(emb)
    return caches


def train_one(
    dataset: Dataset,
    seed: int,
    config: TrainConfig,
    model_config: ModelConfig,
) -> tuple[RunResult, TabularModel]:
    """Train until validation AUC stalls for ``patience`` epochs; keep the best epoch."""
    start = time.perf_counter()
    train, val, test = (dataset.part(s) for s in ("train", "val", "test"))
    for name, part in (("train", train), ("val", val), ("test", test)):
        if len(part) == 0:
            raise DataError(f"{name} split is empty")
    model = TabularModel(dataset.schema, model_config, seed)
    opt = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    best_auc, best_epoch, best_state = -np.inf, -1, model.state_dict()
    epochs = []
    for epoch in range(config.max_epochs):
        loss = train_epoch(model, opt, train, config.batch_size, rng)
        pv = predict(model, val, config.eval_batch)
        val_auc = auc(pv, val.y)
        epochs.append({"epoch": epoch, "train_loss": loss, "val_auc": val_auc, "val_logloss": logloss(pv, val.y)})
        log.debug("seed %d epoch %d loss %.5f val_auc %.5f", seed, epoch, loss, val_auc)
        if val_auc > best_auc:
            best_auc, best_epoch, best_state = val_auc, epoch, model.state_dict()
        elif epoch - best_epoch > config.patience:
            break
    model.load_state_dict(best_state)
    caches = attach_caches(model)
    restored = auc(predict(model, val, config.eval_batch), val.y)
    pt = predict(model, test, config.eval_batch)
    result = RunResult(
        seed=seed,
        epochs=epochs,
        best_epoch=best_epoch,
        best_val_auc=float(best_auc),
        restored_val_auc=restored,
        test_auc=auc(pt, test.y),
        test_logloss=logloss(pt, test.y),
        wall_clock_s=time.perf_counter() - start,
        cache={name: {"hits": c.hits, "misses": c.misses} for name, c in caches.items()},
    )
    log.info("seed %d: %d epochs, best %d, test auc %.4f", seed, len(epochs), best_epoch, result.test_auc)
    return result, model


def train_model(
    dataset: Dataset,
    config: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
    return_models: bool = False,
):
    """Run the protocol once per seed and average test AUC over runs."""
    config = config or TrainConfig()
    model_config = model_config or ModelConfig()
    if dataset.split is None:
        raise DataError("dataset has no train/val/test split")
    start = time.perf_counter()
    runs, models = [], []
    for seed in config.seeds:
        result, model = train_one(dataset, seed, config, model_config)
        runs.append(result)
        models.append(model)
    ref = models[0]
    report = TrainReport(
        runs=runs,
        params=ref.param_report(),
        param_totals=ref.param_totals(),
        train_config=config.to_dict(),
        model_config=model_config.to_dict(),
        wall_clock_s=time.perf_counter() - start,
        cache=_sum_cache_stats(runs),
    )
    return (report, models) if return_models else report


def _sum_cache_stats(runs: list[RunResult]) -> dict:
    total: dict[str, dict[str, int]] = {}
    for run in runs:
        for name, stats in run.cache.items():
            agg = total.setdefault(name, {"hits": 0, "misses": 0})
            for key in agg:
                agg[key] += stats[key]
    return total


SWEEP_AXES = {"depth": "depth", "embed_dim": "d"}


def sweep(
    dataset: Dataset,
    axis: str,
    values: Iterable[int],
    config: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
) -> list[dict]:
    """One :func:`train_model` per value of ``axis`` with everything else fixed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    unique = list(dict.fromkeys(values))
    if len(unique) != len(values):
        log.warning("duplicate sweep values dropped: %s -> %s", values, unique)
    model_config = model_config or ModelConfig()
    rows = []
    for value in unique:
        mc = dataclasses.replace(model_config, **{SWEEP_AXES[axis]: value})
        report = train_model(dataset, config, mc)
        rows.append(
            {
                axis: value,
                "mean_auc": report.test_auc_mean,
                "std_auc": report.test_auc_std,
                "params": report.param_totals["total"],
                "embedding_params": report.param_totals["embedding"],
            }
        )
    return rows


def depth_sweep(dataset, depths, config=None, model_config=None) -> list[dict]:
    return sweep(dataset, "depth", depths, config, model_config)
