"""Experiment protocols: standard training, the PMF race, the online and
cold-start protocols and the complexity-control ablation.

Each protocol returns plain rows; writing them out is the CLI's job.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import (
    DataError,
    Dataset,
    SplitSpec,
    generate_synthetic,
    parse_double_colon_format,
    parse_tab_format,
    split_indices,
)
from .engine import Controls, GenCounters, RecEngine, RecModel
from .nets import Adam
from .store import PrototypeSet, build_store, select_prototypes
from .training import (
    MetricsRow,
    TrainConfig,
    TrainResult,
    build_rec,
    evaluate_rmse,
    mean_predictor_rmse,
    save_checkpoint,
    train,
    train_pmf,
)

logger = logging.getLogger(__name__)

FORMATS = ("ml100k", "mldelim", "synthetic")


@dataclass
class DataSpec:
    format: str = "ml100k"
    path: str | None = None
    synthetic_users: int = 100
    synthetic_items: int = 100
    synthetic_rank: int = 2
    synthetic_density: float = 0.3
    synthetic_noise: float = 0.0
    synthetic_seed: int = 0


def load_dataset(spec: DataSpec) -> Dataset:
    if spec.format not in FORMATS:
        raise ValueError(f"unknown format {spec.format!r}")
    if spec.format == "synthetic":
        return generate_synthetic(
            spec.synthetic_users, spec.synthetic_items, spec.synthetic_rank,
            spec.synthetic_density, spec.synthetic_noise, spec.synthetic_seed,
        )
    if spec.path is None:
        raise DataError(f"--data is required for format {spec.format}")
    path = Path(spec.path)
    if not path.is_file():
        raise DataError(f"cannot read dataset {path}")
    if spec.format == "ml100k":
        return parse_tab_format(path)
    return parse_double_colon_format(path)


@dataclass
class Prepared:
    data: Dataset
    train: Dataset
    valid: Dataset
    valid_idx: np.ndarray


def prepare(spec: DataSpec, split_spec: SplitSpec) -> Prepared:
    data = load_dataset(spec)
    train_idx, valid_idx = split_indices(len(data), split_spec)
    return Prepared(data, data.subset(train_idx), data.subset(valid_idx), valid_idx)


def param_digest(model: RecModel) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_params().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- train


@dataclass
class TrainOutcome:
    model: RecModel
    result: TrainResult
    valid_rmse: float
    protos: PrototypeSet


def run_train(
    train_data: Dataset,
    valid: Dataset,
    config: TrainConfig,
    sink: Callable[[MetricsRow], None] | None = None,
    checkpoint: Path | None = None,
    checkpoint_every: int = 0,
) -> TrainOutcome:
    """Store, prototypes, block pretraining, end-to-end training, final RMSE."""
    store = build_store(train_data)
    protos = select_prototypes(store, config.num_proto_users, config.num_proto_items)
    model = build_rec(store, protos, config)
    adam = Adam(lr=config.lr)

    def on_row(row: MetricsRow):
        if sink is not None:
            sink(row)
        if checkpoint is not None and checkpoint_every and row.iteration % checkpoint_every == 0:
            save_checkpoint(checkpoint, model, adam, extra={"iteration": row.iteration})

    result = train(model, store, train_data, config, valid=valid, sink=on_row, adam=adam)
    final = next((r.valid_rmse for r in reversed(result.history) if r.valid_rmse is not None), None)
    if final is None:
        final = evaluate_rmse(RecEngine(model, store), valid, seed=config.eval_seed)
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, result.adam, extra={"iteration": config.iterations})
    return TrainOutcome(model, result, final, protos)


def run_compare(
    train_data: Dataset,
    valid: Dataset,
    config: TrainConfig,
    rec_sink: Callable[[MetricsRow], None] | None = None,
    pmf_sink: Callable[[MetricsRow], None] | None = None,
    pmf_config: TrainConfig | None = None,
) -> tuple[TrainResult, TrainResult]:
    """REC and PMF on the same split, the same pretraining and batch schedule."""
    store = build_store(train_data)
    protos = select_prototypes(store, config.num_proto_users, config.num_proto_items)
    model = build_rec(store, protos, config)
    rec = train(model, store, train_data, config, valid=valid, sink=rec_sink)
    _, pmf = train_pmf(store, train_data, pmf_config or config, protos=protos, valid=valid, sink=pmf_sink)
    return rec, pmf


# ---------------------------------------------------------------- online


@dataclass
class OnlineRow:
    stage: str
    fraction: float
    num_users: int
    num_items: int
    evidence_ratings: int
    test_ratings: int
    rmse: float


@dataclass
class OnlineResult:
    rows: list[OnlineRow]
    num_params: int
    seen_percent: float
    new_rows_and_columns: int
    updates_after_initial: int
    history: list[MetricsRow] = field(default_factory=list)
    selected_iteration: int | None = None


def _growth_order(n: int, protos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Prototypes first, the rest in random order."""
    rest = np.setdiff1d(np.arange(n), protos)
    return np.concatenate([protos, rng.permutation(rest)])


def _stage_of(order: np.ndarray, fractions: list[float]) -> np.ndarray:
    """Stage index (0-based) at which each id enters."""
    n = len(order)
    stage = np.empty(n, dtype=np.int64)
    prev = 0
    for s, f in enumerate(fractions):
        upto = n if s == len(fractions) - 1 else int(round(f * n))
        upto = max(upto, prev)
        stage[order[prev:upto]] = s
        prev = upto
    return stage


def online_fractions(initial: float, increment: float) -> list[float]:
    if not 0 < initial <= 1 or not 0 < increment <= 1:
        raise ValueError("online fractions must lie in (0, 1]")
    out = [initial]
    while out[-1] < 1 - 1e-9:
        out.append(min(1.0, round(out[-1] + increment, 10)))
    return out


def run_online(
    data: Dataset,
    config: TrainConfig,
    initial_fraction: float = 0.2,
    increment: float = 0.2,
    train_fraction: float = 0.8,
    seed: int = 0,
    sink: Callable[[MetricsRow], None] | None = None,
    holdout_fraction: float = 0.0,
) -> OnlineResult:
    """Train on an initial block of rows and columns, then grow it without retraining.

    Prototypes come from the whole dataset.  Every stage's newly visible
    ratings are split into evidence (added to the store) and test ratings;
    RMSE is measured on the cumulative test set after each stage, and a final
    row scores only test ratings that touch a row or column outside the
    initial block.

    With ``holdout_fraction > 0`` that share of the initial training
    ratings is scored every ``config.eval_every`` iterations and the
    parameters with the lowest holdout RMSE are kept.  Test ratings are
    never consulted.
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in [0, 1)")
    if holdout_fraction > 0 and config.eval_every <= 0:
        raise ValueError("holdout selection needs eval_every > 0")
    fractions = online_fractions(initial_fraction, increment)
    full_store = build_store(data)
    protos = select_prototypes(full_store, config.num_proto_users, config.num_proto_items)
    if initial_fraction * data.num_users < len(protos.users) or initial_fraction * data.num_items < len(protos.items):
        logger.warning("initial block is smaller than the prototype set; prototypes are kept anyway")
    rng = np.random.default_rng([seed, 3])
    ustage = _stage_of(_growth_order(data.num_users, protos.users, rng), fractions)
    istage = _stage_of(_growth_order(data.num_items, protos.items, rng), fractions)
    rstage = np.maximum(ustage[data.users], istage[data.items])

    is_test = np.zeros(len(data), dtype=bool)
    for s in range(len(fractions)):
        idx = np.nonzero(rstage == s)[0]
        if len(idx) == 0:
            continue
        _, test_pos = split_indices(len(idx), SplitSpec(train_fraction, seed * 1000 + s))
        is_test[idx[test_pos]] = True

    initial = data.subset(np.nonzero((rstage == 0) & ~is_test)[0])
    if len(initial) == 0:
        raise DataError("initial block holds no training ratings")
    holdout = None
    if holdout_fraction > 0:
        fit_pos, hold_pos = split_indices(len(initial), SplitSpec(1.0 - holdout_fraction, seed * 1000 + 999))
        initial, holdout = initial.subset(fit_pos), initial.subset(hold_pos)
    store0 = build_store(initial)
    model = build_rec(store0, protos, config)
    best = {"rmse": np.inf, "params": None, "iteration": 0}

    def keep_best(row: MetricsRow) -> None:
        if row.valid_rmse is not None and row.valid_rmse < best["rmse"]:
            best.update(rmse=row.valid_rmse, iteration=row.iteration,
                        params={k: v.copy() for k, v in model.named_params().items()})
        if sink is not None:
            sink(row)

    history = train(model, store0, initial, config, valid=holdout, sink=keep_best).history
    if best["params"] is not None:
        for k, v in model.named_params().items():
            v[...] = best["params"][k]
        logger.info("kept parameters from iteration %d (holdout rmse %.4f)", best["iteration"], best["rmse"])
    frozen = param_digest(model)

    rows = []
    for s, f in enumerate(fractions):
        evidence = data.subset(np.nonzero((rstage <= s) & ~is_test)[0])
        test = data.subset(np.nonzero((rstage <= s) & is_test)[0])
        eng = RecEngine(model, build_store(evidence))
        rows.append(OnlineRow(f"{round(100 * f)}%", f, int((ustage <= s).sum()), int((istage <= s).sum()),
                              len(evidence), len(test), evaluate_rmse(eng, test, seed=config.eval_seed)))
    evidence = data.subset(np.nonzero(~is_test)[0])
    novel = data.subset(np.nonzero((rstage > 0) & is_test)[0])
    eng = RecEngine(model, build_store(evidence))
    rows.append(OnlineRow("novel", 1.0, data.num_users, data.num_items, len(evidence), len(novel),
                          evaluate_rmse(eng, novel, seed=config.eval_seed)))
    updates = 0 if param_digest(model) == frozen else 1
    return OnlineResult(
        rows=rows,
        num_params=model.num_params(),
        seen_percent=100.0 * len(initial) / len(data),
        new_rows_and_columns=int((ustage > 0).sum() + (istage > 0).sum()),
        updates_after_initial=updates,
        history=history,
        selected_iteration=best["iteration"] if best["params"] is not None else None,
    )


# ---------------------------------------------------------------- cold start


@dataclass
class ColdStartRow:
    n_c: int
    n_r: int
    train_ratings: int
    valid_rmse: float
    mean_rmse: float


def cold_start_train(train_data: Dataset, n_c: int, n_r: int, seed: int, eligible: np.ndarray) -> Dataset:
    """Copy of ``train_data`` where ``n_c`` users keep at most ``n_r`` ratings.

    Users are the first ``n_c`` of a seeded permutation of ``eligible``, so
    larger ``n_c`` extends the smaller sets.
    """
    if n_c > len(eligible):
        raise ValueError(f"N_c={n_c} exceeds the {len(eligible)} eligible users")
    if n_r < 1:
        raise ValueError("n_r must be at least 1")
    users = np.random.default_rng([seed, 4]).permutation(eligible)[:n_c]
    keep = np.ones(len(train_data), dtype=bool)
    rng = np.random.default_rng([seed, 5, n_r])
    for u in np.sort(users):
        rows = np.nonzero(train_data.users == u)[0]
        if len(rows) > n_r:
            keep[rows] = False
            keep[rng.choice(rows, n_r, replace=False)] = True
    return train_data.subset(np.nonzero(keep)[0])


def run_cold_start(
    train_data: Dataset,
    valid: Dataset,
    config: TrainConfig,
    n_c_values=(0, 50, 100, 150),
    n_r_values=(1, 5, 10),
    seed: int = 0,
    on_row: Callable[[ColdStartRow], None] | None = None,
) -> list[ColdStartRow]:
    """Retrain from scratch for every grid cell; score on the full validation set."""
    store = build_store(train_data)
    protos = select_prototypes(store, config.num_proto_users, config.num_proto_items)
    eligible = np.setdiff1d(np.nonzero(store.user_degree() > 0)[0], protos.users)
    for n_c in n_c_values:
        if n_c > len(eligible):
            raise ValueError(f"N_c={n_c} exceeds the {len(eligible)} eligible users")
    baseline = mean_predictor_rmse(train_data, valid)
    done: dict[bytes, float] = {}
    rows = []
    for n_c in n_c_values:
        for n_r in n_r_values:
            reduced = cold_start_train(train_data, n_c, n_r, seed, eligible)
            key = hashlib.sha256(reduced.users.tobytes() + reduced.items.tobytes()).digest()
            if key not in done:  # identical training data gives an identical run
                logger.info("cold start N_c=%d n_r=%d: %d training ratings", n_c, n_r, len(reduced))
                done[key] = run_train(reduced, valid, config.replace(eval_every=0)).valid_rmse
            row = ColdStartRow(n_c, n_r, len(reduced), done[key], baseline)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


# ---------------------------------------------------------------- ablation

ABLATION_CHAIN = ("MD", "MD+CB", "MD+CB+EL", "MD+CB+EL+PP", "MD+CB+EL+PP+TEL")


def ablation_controls(name: str, caching: bool, max_depth: int, evidence_limit: int) -> Controls:
    parts = set(name.split("+"))
    unknown = parts - {"MD", "CB", "EL", "PP", "TEL"}
    if unknown or "MD" not in parts:
        raise ValueError(f"bad control combination {name!r}")
    return Controls(
        max_depth=max_depth,
        evidence_limit=evidence_limit if "EL" in parts else None,
        cycle_blocking="CB" in parts,
        caching=caching,
        negative_caching=caching,
        prototype_prioritization="PP" in parts,
        telescoping="TEL" in parts,
    )


@dataclass
class AblationRow:
    controls: str
    caching: bool
    seeds: int
    embeddings_generated: float
    failed_requests: float
    cache_hits: float
    evidence_max: dict[int, int]
    budget_ok: bool


def count_batch(engine: RecEngine, users, items, rng) -> GenCounters:
    """Plan one batch of predictions and return its counters."""
    ctx = engine.new_context(rng, requires_grad=False)
    engine.plan(users, items, ctx)
    return ctx.counters


def run_ablation(
    train_data: Dataset,
    num_proto_users: int = 50,
    num_proto_items: int = 50,
    max_depth: int = 2,
    evidence_limit: int = 80,
    batch: int = 10,
    seeds=range(20),
    combos=ABLATION_CHAIN,
    on_row: Callable[[AblationRow], None] | None = None,
) -> list[AblationRow]:
    """Average generation counters for a fixed batch workload per control set.

    Only the planning pass runs, so parameter values are irrelevant and the
    model is built with the smallest possible nets.
    """
    store = build_store(train_data)
    protos = select_prototypes(store, num_proto_users, num_proto_items)
    seeds = list(seeds)
    batches = []
    for s in seeds:
        idx = np.random.default_rng([s, 5]).integers(0, len(train_data), batch)
        batches.append((train_data.users[idx], train_data.items[idx]))
    rows = []
    for name in combos:
        for caching in (False, True):
            ctl = ablation_controls(name, caching, max_depth, evidence_limit)
            model = RecModel.initialize(store, protos, k=1, hidden=1, controls=ctl)
            eng = RecEngine(model, store)
            total = GenCounters()
            gen, failed, hits = [], [], []
            for s, (users, items) in zip(seeds, batches):
                c = count_batch(eng, users, items, np.random.default_rng([s, 6]))
                gen.append(c.embeddings_generated)
                failed.append(c.failed_requests)
                hits.append(c.cache_hits)
                total.merge(c)
            ok = all(ctl.budget(d) is None or n <= ctl.budget(d) for d, n in total.evidence_max.items())
            row = AblationRow(name, caching, len(seeds), float(np.mean(gen)), float(np.mean(failed)),
                              float(np.mean(hits)), dict(sorted(total.evidence_max.items())), ok)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows
