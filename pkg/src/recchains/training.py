"""End-to-end training of REC, prototype-block pretraining and the PMF baseline."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .engine import RATING_ENCODINGS, Controls, EvidenceContext, GenCounters, RecEngine, RecModel
from .nets import Adam, MLPParams, init_tables, proto_rng
from .store import PrototypeSet, RatingsStore, prototype_block

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k: int = 100
    num_proto_users: int = 50
    num_proto_items: int = 50
    el: int | None = 80
    md: int = 4
    batch_size: int = 1000
    lr: float = 1e-3
    lam: float = 1e-5
    iterations: int = 2000
    pretrain_iterations: int = 500
    hidden: int = 200
    init_seed: int = 0
    sampling_seed: int = 1
    eval_seed: int = 2
    eval_every: int = 10
    cycle_blocking: bool = True
    caching: bool = True
    negative_caching: bool = True
    prototype_prioritization: bool = True
    telescoping: bool = True
    rating_encoding: str = "raw"

    def __post_init__(self):
        for name in ("k", "batch_size", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("md", "iterations", "pretrain_iterations", "num_proto_users", "num_proto_items", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.el is not None and self.el < 1:
            raise ValueError("el must be positive")
        if self.lr < 0 or self.lam < 0:
            raise ValueError("lr and lam must be non-negative")
        if self.rating_encoding not in RATING_ENCODINGS:
            raise ValueError(f"rating_encoding must be one of {RATING_ENCODINGS}")

    def controls(self) -> Controls:
        return Controls(
            max_depth=self.md,
            evidence_limit=self.el,
            cycle_blocking=self.cycle_blocking,
            caching=self.caching,
            negative_caching=self.negative_caching,
            prototype_prioritization=self.prototype_prioritization,
            telescoping=self.telescoping,
        )

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def batch_rng(config: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([config.sampling_seed, 0])


def evidence_rng(config: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([config.sampling_seed, 1])


def pretrain_rng(config: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([config.sampling_seed, 2])


@dataclass
class LossTerms:
    total: ad.Tensor
    squared_error: float
    reg_protos: float
    reg_nets: float
    fallbacks: int
    counters: GenCounters

    @property
    def value(self) -> float:
        return float(self.total.value)


def loss(engine: RecEngine, users, items, ratings, lam: float, ctx: EvidenceContext) -> LossTerms:
    """Squared error of recursive predictions plus L2 on prototypes and nets.

    Pairs whose embedding chain fails fall back to the mean; their error is a
    constant on the tape and sends no gradient anywhere.
    """
    ratings = np.asarray(ratings, dtype=np.float64)
    pred, ok = engine.predict_batch(users, items, ctx)
    tape = ctx.tape
    fallback_err = float(np.sum((ratings[~ok] - engine.model.rating_mean) ** 2))
    if pred is None:
        sq = tape.constant(0.0)
    else:
        resid = ad.add(pred, tape.constant(-ratings[ok]))
        sq = ad.sum(ad.square(resid))
    reg_p = ad.scale(ad.add(ad.sum(ad.square(ctx.user_table)), ad.sum(ad.square(ctx.item_table))), lam)
    net_terms = [ad.sum(ad.square(t)) for layers in ctx.nets for pair in layers for t in pair]
    reg_n = ad.scale(_add_all(net_terms), lam)
    total = ad.add(ad.add(ad.add(sq, fallback_err), reg_p), reg_n)
    return LossTerms(
        total=total,
        squared_error=float(sq.value) + fallback_err,
        reg_protos=float(reg_p.value),
        reg_nets=float(reg_n.value),
        fallbacks=int((~ok).sum()),
        counters=ctx.counters,
    )


def _add_all(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


# ---------------------------------------------------------------- PMF pieces


def pmf_grads(u: np.ndarray, v: np.ndarray, users, items, ratings, lam: float):
    """Squared-error + L2 loss of ``u @ v.T`` on a batch and its gradients."""
    uu, vv = u[users], v[items]
    err = ratings - (uu * vv).sum(axis=1)
    gu = np.zeros_like(u)
    gv = np.zeros_like(v)
    np.add.at(gu, users, (-2.0 * err)[:, None] * vv)
    np.add.at(gv, items, (-2.0 * err)[:, None] * uu)
    gu += 2.0 * lam * u
    gv += 2.0 * lam * v
    sq = float(err @ err)
    reg = lam * float(np.sum(u * u) + np.sum(v * v))
    return sq, reg, gu, gv


def fit_factors(u, v, data: Dataset, iterations: int, batch_size: int, lr: float, lam: float, rng) -> list[float]:
    """Mini-batch Adam on ``u``, ``v`` in place; returns per-step batch RMSE."""
    if len(data) == 0 or iterations == 0:
        return []
    opt = Adam(lr=lr)
    history = []
    for _ in range(iterations):
        idx = rng.integers(0, len(data), batch_size)
        sq, _, gu, gv = pmf_grads(u, v, data.users[idx], data.items[idx], data.ratings[idx], lam)
        opt.step({"u": u, "v": v}, {"u": gu, "v": gv})
        history.append(math.sqrt(sq / batch_size))
    return history


def pretrain_prototype_block(model: RecModel, store: RatingsStore, config: TrainConfig) -> list[float]:
    """PMF on the ratings between prototype users and prototype items only."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        block = prototype_block(store, model.protos)
    if len(block.data) == 0:
        warnings.warn("prototype block is empty; skipping pretraining", RuntimeWarning, stacklevel=2)
        return []
    return fit_factors(
        model.user_protos, model.item_protos, block.data,
        config.pretrain_iterations, config.batch_size, config.lr, config.lam, pretrain_rng(config),
    )


@dataclass
class MetricsRow:
    iteration: int
    train_rmse: float
    valid_rmse: float | None
    embeddings_generated: int
    cache_hits: int
    failed_requests: int
    elapsed_seconds: float
    loss: float = float("nan")
    squared_error: float = float("nan")
    reg_protos: float = float("nan")
    reg_nets: float = float("nan")


@dataclass
class TrainResult:
    history: list[MetricsRow] = field(default_factory=list)
    adam: Adam | None = None

    def valid_curve(self) -> list[tuple[int, float]]:
        return [(r.iteration, r.valid_rmse) for r in self.history if r.valid_rmse is not None]


def _should_eval(it: int, config: TrainConfig, total: int) -> bool:
    return config.eval_every > 0 and (it % config.eval_every == 0 or it == total)


def train(
    model: RecModel,
    store: RatingsStore,
    train_data: Dataset,
    config: TrainConfig,
    valid: Dataset | None = None,
    sink: Callable[[MetricsRow], None] | None = None,
    adam: Adam | None = None,
    start_iteration: int = 0,
) -> TrainResult:
    """Optimize all of the model's parameters on ``train_data``.

    ``store`` must be built from ``train_data``.  Caches live in one
    :class:`EvidenceContext` per update and are dropped with it.
    """
    engine = RecEngine(model, store)
    adam = adam or Adam(lr=config.lr)
    rng = batch_rng(config)
    ev_rng = evidence_rng(config)
    result = TrainResult(adam=adam)
    t0 = time.perf_counter()
    n = len(train_data)
    if n == 0:
        raise TrainingError("empty training set")
    for step in range(1, config.iterations + 1):
        it = start_iteration + step
        idx = rng.integers(0, n, config.batch_size)
        ctx = engine.new_context(ev_rng)
        try:
            terms = loss(engine, train_data.users[idx], train_data.items[idx], train_data.ratings[idx], config.lam, ctx)
            if not math.isfinite(terms.value):
                raise FloatingPointError("loss is not finite")
            grads = ad.leaf_grads(terms.total)
        except FloatingPointError as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        adam.step(model.named_params(), grads)
        del ctx
        valid_rmse = None
        if valid is not None and _should_eval(step, config, config.iterations):
            valid_rmse = evaluate_rmse(engine, valid, seed=config.eval_seed)
        c = terms.counters
        row = MetricsRow(
            iteration=it,
            train_rmse=math.sqrt(terms.squared_error / config.batch_size),
            valid_rmse=valid_rmse,
            embeddings_generated=c.embeddings_generated,
            cache_hits=c.cache_hits,
            failed_requests=c.failed_requests,
            elapsed_seconds=time.perf_counter() - t0,
            loss=terms.value,
            squared_error=terms.squared_error,
            reg_protos=terms.reg_protos,
            reg_nets=terms.reg_nets,
        )
        result.history.append(row)
        if sink is not None:
            sink(row)
        logger.debug("iter %d train %.4f valid %s", it, row.train_rmse, valid_rmse)
    return result


def build_rec(store: RatingsStore, protos: PrototypeSet, config: TrainConfig, pretrain: bool = True) -> RecModel:
    model = RecModel.initialize(store, protos, k=config.k, seed=config.init_seed, controls=config.controls(),
                                hidden=config.hidden, rating_encoding=config.rating_encoding)
    if pretrain:
        pretrain_prototype_block(model, store, config)
    return model


# ---------------------------------------------------------------- PMF


class PMFModel:
    """Dense latent-factor model: one K-vector per user and per item."""

    def __init__(self, u: np.ndarray, v: np.ndarray, rating_mean: float, rating_scale):
        self.u = u
        self.v = v
        self.rating_mean = rating_mean
        self.rating_scale = rating_scale

    @classmethod
    def initialize(cls, store: RatingsStore, k: int, seed: int) -> "PMFModel":
        u, v = init_tables(proto_rng(seed), store.num_users, store.num_items, k)
        return cls(u, v, store.mean_rating, store.rating_scale)

    def predict(self, users, items) -> np.ndarray:
        return (self.u[users] * self.v[items]).sum(axis=1)

    def num_params(self) -> int:
        return self.u.size + self.v.size


def train_pmf(
    store: RatingsStore,
    train_data: Dataset,
    config: TrainConfig,
    protos: PrototypeSet | None = None,
    valid: Dataset | None = None,
    sink: Callable[[MetricsRow], None] | None = None,
) -> tuple[PMFModel, TrainResult]:
    """PMF baseline sharing REC's init stream, batch schedule, optimizer and
    (when ``protos`` is given) prototype-block pretraining."""
    model = PMFModel.initialize(store, config.k, config.init_seed)
    if protos is not None and config.pretrain_iterations > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            block = prototype_block(store, protos)
        bu, bv = model.u[protos.users], model.v[protos.items]
        fit_factors(bu, bv, block.data, config.pretrain_iterations, config.batch_size, config.lr, config.lam, pretrain_rng(config))
        model.u[protos.users] = bu
        model.v[protos.items] = bv
    adam = Adam(lr=config.lr)
    rng = batch_rng(config)
    result = TrainResult(adam=adam)
    n = len(train_data)
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        idx = rng.integers(0, n, config.batch_size)
        sq, reg, gu, gv = pmf_grads(model.u, model.v, train_data.users[idx], train_data.items[idx], train_data.ratings[idx], config.lam)
        if not math.isfinite(sq + reg):
            raise TrainingError(f"iteration {it}: loss is not finite")
        adam.step({"u": model.u, "v": model.v}, {"u": gu, "v": gv})
        valid_rmse = None
        if valid is not None and _should_eval(it, config, config.iterations):
            valid_rmse = evaluate_rmse(model, valid)
        row = MetricsRow(it, math.sqrt(sq / config.batch_size), valid_rmse, 0, 0, 0,
                         time.perf_counter() - t0, sq + reg, sq, reg, 0.0)
        result.history.append(row)
        if sink is not None:
            sink(row)
    return model, result


# ---------------------------------------------------------------- evaluation


def rmse(ratings, predictions) -> float:
    ratings = np.asarray(ratings, dtype=np.float64)
    if len(ratings) == 0:
        raise ValueError("cannot compute RMSE of an empty set")
    d = ratings - np.asarray(predictions, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def predict_dataset(predictor, data: Dataset, seed: int = 0, chunk: int | None = None, counters: GenCounters | None = None) -> np.ndarray:
    """Unclamped predictions for every record of ``data``.

    For a :class:`RecEngine` one evidence context (and cache) spans each
    chunk; ``chunk=None`` shares one context over the whole set, which is
    valid because parameters are frozen during evaluation.
    """
    if isinstance(predictor, RecEngine):
        rng = np.random.default_rng(seed)
        out = np.empty(len(data))
        step = chunk or max(len(data), 1)
        for lo in range(0, len(data), step):
            ctx = predictor.new_context(rng, requires_grad=False)
            sl = slice(lo, lo + step)
            out[sl] = predictor.predict_values(data.users[sl], data.items[sl], ctx)
            if counters is not None:
                counters.merge(ctx.counters)
        return out
    if hasattr(predictor, "predict"):
        return np.asarray(predictor.predict(data.users, data.items), dtype=np.float64)
    raise TypeError(f"cannot predict with {type(predictor).__name__}")


def evaluate_rmse(predictor, data: Dataset, seed: int = 0, clamp: bool = True, chunk: int | None = None) -> float:
    """RMSE on ``data`` with predictions clamped to the rating scale."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    pred = predict_dataset(predictor, data, seed=seed, chunk=chunk)
    if clamp:
        pred = np.clip(pred, *data.rating_scale)
    return rmse(data.ratings, pred)


def mean_predictor_rmse(train_data: Dataset, valid: Dataset) -> float:
    return rmse(valid.ratings, np.full(len(valid), train_data.mean_rating))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: RecModel, adam: Adam | None = None, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.named_params().items()}
    arrays["protos/users"] = model.protos.users
    arrays["protos/items"] = model.protos.items
    meta = {
        "version": CHECKPOINT_VERSION,
        "k": model.k,
        "num_users": model.protos.num_users,
        "num_items": model.protos.num_items,
        "layers": len(model.phi.weights),
        "rating_mean": model.rating_mean,
        "rating_scale": list(model.rating_scale),
        "rating_encoding": model.rating_encoding,
        "controls": asdict(model.controls),
        "extra": extra or {},
    }
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t}
        for k in adam.m:
            arrays[f"adam_m/{k}"] = adam.m[k]
            arrays[f"adam_v/{k}"] = adam.v[k]
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[RecModel, Adam | None, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        protos = PrototypeSet(z["protos/users"], z["protos/items"], meta["num_users"], meta["num_items"])
        nets = []
        for prefix in ("phi", "psi"):
            n = meta["layers"]
            nets.append(MLPParams(
                [z[f"param/{prefix}.w{i}"].copy() for i in range(n)],
                [z[f"param/{prefix}.b{i}"].copy() for i in range(n)],
            ))
        model = RecModel(protos, nets[0], nets[1], z["param/u"].copy(), z["param/v"].copy(),
                         meta["rating_mean"], tuple(meta["rating_scale"]), Controls(**meta["controls"]),
                         meta["rating_encoding"])
        adam = None
        if "adam" in meta:
            a = meta["adam"]
            adam = Adam(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
            for k in model.named_params():
                if f"adam_m/{k}" in z:
                    adam.m[k] = z[f"adam_m/{k}"].copy()
                    adam.v[k] = z[f"adam_v/{k}"].copy()
    return model, adam, meta.get("extra", {})
