"""``rec`` command line: train, compare-pmf, online, cold-start, ablation.

Every command writes CSV files whose leading ``#`` lines record the fully
resolved configuration, so a result file can be replayed from its header.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .data import DataError, SplitSpec, save_split
from .experiments import (
    ABLATION_CHAIN,
    FORMATS,
    DataSpec,
    prepare,
    run_ablation,
    run_cold_start,
    run_compare,
    run_online,
    run_train,
)
from .training import MetricsRow, TrainConfig, TrainingError

logger = logging.getLogger("recchains")

OUTPUT_ENV = "REC_OUTPUT_DIR"
METRIC_COLUMNS = ["iteration", "train_rmse", "valid_rmse", "embeddings_generated", "cache_hits",
                  "failed_requests", "elapsed_seconds"]
FLAG_HELP = {
    "k": "latent dimension",
    "num_proto_users": "number of prototype users",
    "num_proto_items": "number of prototype items",
    "el": "evidence limit (0 means unlimited)",
    "md": "max recursion depth",
    "batch_size": "ratings per gradient update",
    "lr": "Adam learning rate",
    "lam": "L2 weight on prototypes and nets",
    "iterations": "gradient updates",
    "pretrain_iterations": "prototype-block pretraining updates",
    "hidden": "hidden width of both generator nets",
    "init_seed": "parameter initialization seed",
    "sampling_seed": "batch and evidence sampling seed",
    "eval_seed": "evidence sampling seed for evaluation",
    "eval_every": "validation cadence in iterations (0: never)",
    "rating_encoding": "how a rating is fed to the nets",
}


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


class CsvWriter:
    """Line-buffered CSV with ``#`` comment header lines."""

    def __init__(self, path: Path, header: list[str], columns: list[str]):
        self.path = path
        self.columns = columns
        self.fh = path.open("w", encoding="utf-8", newline="\n")
        for line in header:
            self.fh.write(f"# {line}\n")
        self.fh.write(",".join(columns) + "\n")
        self.fh.flush()

    def row(self, values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"{self.path}: expected {len(self.columns)} values")
        self.fh.write(",".join(_fmt(v) for v in values) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _metrics_values(row: MetricsRow):
    return [row.iteration, row.train_rmse, row.valid_rmse, row.embeddings_generated, row.cache_hits,
            row.failed_requests, row.elapsed_seconds]


def _positive_fraction(text: str) -> float:
    x = float(text)
    if not 0 < x <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1]")
    return x


def _int_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out or min(out) < 0:
        raise argparse.ArgumentTypeError(f"expected non-negative integers, got {text!r}")
    return out


def _common_parser() -> argparse.ArgumentParser:
    # built fresh per subcommand: parents share action objects, so one
    # subcommand's set_defaults would otherwise leak into the others
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("data")
    g.add_argument("--data", help="ratings file (u.data or ratings.dat)")
    g.add_argument("--format", choices=FORMATS, default="ml100k")
    g.add_argument("--synthetic-users", type=int, default=100)
    g.add_argument("--synthetic-items", type=int, default=100)
    g.add_argument("--synthetic-rank", type=int, default=2)
    g.add_argument("--synthetic-density", type=float, default=0.3)
    g.add_argument("--synthetic-noise", type=float, default=0.0)
    g.add_argument("--synthetic-seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./rec-output)")
    g.add_argument("-v", "--verbose", action="store_true")

    t = p.add_argument_group("model and training")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        value = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(value, bool):
            t.add_argument("--no-" + f.name.replace("_", "-"), dest=f.name, action="store_false",
                           help=f"disable {f.name.replace('_', ' ')}")
        elif f.name == "el":
            t.add_argument(flag, type=int, default=value, help=FLAG_HELP[f.name])
        elif f.name == "rating_encoding":
            t.add_argument(flag, choices=("normalized", "raw"), default=value, help=FLAG_HELP[f.name])
        else:
            t.add_argument(flag, type=type(value), default=value, help=FLAG_HELP.get(f.name))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rec", description="Recursive evidence chains for matrix completion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", parents=[_common_parser()], help="train REC and report validation RMSE")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N iterations")

    p = sub.add_parser("compare-pmf", parents=[_common_parser()], help="REC vs PMF validation curves")
    p.add_argument("--pmf-batch-size", type=int, help="PMF batch size (default: --batch-size)")
    p.set_defaults(iterations=250, eval_every=1)

    p = sub.add_parser("online", parents=[_common_parser()], help="train on a block, then grow it without retraining")
    p.add_argument("--online-initial-fraction", type=_positive_fraction, default=0.2)
    p.add_argument("--online-increment", type=_positive_fraction, default=0.2)
    p.add_argument("--online-seed", type=int, default=0)
    p.add_argument("--online-holdout", type=float, default=0.1,
                   help="share of initial training ratings used to pick the kept parameters (0 keeps the last)")
    p.set_defaults(eval_every=25)

    p = sub.add_parser("cold-start", parents=[_common_parser()], help="grid over cold users and their kept ratings")
    p.add_argument("--nc", type=_int_list, default=[0, 50, 100, 150], help="cold user counts, e.g. 0,50,100")
    p.add_argument("--nr", type=_int_list, default=[1, 5, 10], help="ratings kept per cold user")
    p.add_argument("--cold-seed", type=int, default=0)
    p.set_defaults(eval_every=0)

    p = sub.add_parser("ablation", parents=[_common_parser()], help="generation counters per complexity control set")
    p.add_argument("--ablation-batch", type=int, default=10)
    p.add_argument("--ablation-seeds", type=int, default=20)
    p.add_argument("--combos", default=",".join(ABLATION_CHAIN), help="comma-separated, e.g. MD,MD+CB")
    p.set_defaults(md=2)
    return parser


def resolve(args) -> tuple[DataSpec, SplitSpec, TrainConfig, Path]:
    data = DataSpec(
        format=args.format, path=args.data,
        synthetic_users=args.synthetic_users, synthetic_items=args.synthetic_items,
        synthetic_rank=args.synthetic_rank, synthetic_density=args.synthetic_density,
        synthetic_noise=args.synthetic_noise, synthetic_seed=args.synthetic_seed,
    )
    split_spec = SplitSpec(args.train_fraction, args.split_seed)
    values = {name: getattr(args, name) for name in TrainConfig.field_names()}
    if values["el"] == 0:
        values["el"] = None
    config = TrainConfig(**values)
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "rec-output")
    return data, split_spec, config, out


def header(command: str, data: DataSpec, split_spec: SplitSpec, config: TrainConfig, extra: dict | None = None) -> list[str]:
    lines = [f"rec {command} (recchains {__version__})"]
    lines += [f"data.{k}={_fmt(v)}" for k, v in asdict(data).items()]
    lines += [f"split.{k}={_fmt(v)}" for k, v in asdict(split_spec).items()]
    lines += [f"config.{k}={_fmt(v)}" for k, v in asdict(config).items()]
    lines += [f"{k}={_fmt(v)}" for k, v in (extra or {}).items()]
    return lines


def cmd_train(args, data, split_spec, config, out: Path) -> None:
    prep = prepare(data, split_spec)
    save_split(out / "valid_indices.txt", prep.valid_idx)
    with CsvWriter(out / "metrics.csv", header("train", data, split_spec, config), METRIC_COLUMNS) as w:
        outcome = run_train(prep.train, prep.valid, config, sink=lambda r: w.row(_metrics_values(r)),
                            checkpoint=out / "checkpoint.npz", checkpoint_every=args.checkpoint_every)
    print(f"final valid_rmse {outcome.valid_rmse:.4f}")


def cmd_compare_pmf(args, data, split_spec, config, out: Path) -> None:
    prep = prepare(data, split_spec)
    save_split(out / "valid_indices.txt", prep.valid_idx)
    pmf_config = config.replace(batch_size=args.pmf_batch_size or config.batch_size)
    with CsvWriter(out / "rec.csv", header("compare-pmf rec", data, split_spec, config), METRIC_COLUMNS) as wr, \
            CsvWriter(out / "pmf.csv", header("compare-pmf pmf", data, split_spec, pmf_config), METRIC_COLUMNS) as wp:
        rec, pmf = run_compare(prep.train, prep.valid, config,
                               rec_sink=lambda r: wr.row(_metrics_values(r)),
                               pmf_sink=lambda r: wp.row(_metrics_values(r)), pmf_config=pmf_config)
    for name, res in (("rec", rec), ("pmf", pmf)):
        curve = res.valid_curve()
        below = next((it for it, v in curve if v < 1.0), None)
        last = curve[-1] if curve else (None, None)
        print(f"{name}: first iteration below 1.0: {below}; final valid_rmse {last[1]}")


def cmd_online(args, data, split_spec, config, out: Path) -> None:
    ds = prepare(data, split_spec).data
    extra = {"online_initial_fraction": args.online_initial_fraction, "online_increment": args.online_increment,
             "online_seed": args.online_seed, "online_holdout": args.online_holdout}
    hdr = header("online", data, split_spec, config, extra)
    with CsvWriter(out / "online_train.csv", hdr, METRIC_COLUMNS) as w:
        res = run_online(ds, config, args.online_initial_fraction, args.online_increment,
                         split_spec.train_fraction, args.online_seed, sink=lambda r: w.row(_metrics_values(r)),
                         holdout_fraction=args.online_holdout)
    info = {"num_params": res.num_params, "seen_percent": res.seen_percent,
            "new_rows_and_columns": res.new_rows_and_columns, "updates_after_initial": res.updates_after_initial,
            "selected_iteration": res.selected_iteration}
    cols = ["stage", "fraction", "num_users", "num_items", "evidence_ratings", "test_ratings", "rmse"]
    with CsvWriter(out / "online.csv", hdr + [f"{k}={_fmt(v)}" for k, v in info.items()], cols) as w:
        for r in res.rows:
            w.row([r.stage, r.fraction, r.num_users, r.num_items, r.evidence_ratings, r.test_ratings, r.rmse])
    print(f"novel-data rmse {res.rows[-1].rmse:.4f}; parameters {res.num_params / 1e6:.3f}M")


def cmd_cold_start(args, data, split_spec, config, out: Path) -> None:
    prep = prepare(data, split_spec)
    save_split(out / "valid_indices.txt", prep.valid_idx)
    extra = {"nc": ",".join(map(str, args.nc)), "nr": ",".join(map(str, args.nr)), "cold_seed": args.cold_seed}
    cols = ["n_c", "n_r", "train_ratings", "valid_rmse", "mean_rmse"]
    with CsvWriter(out / "cold_start.csv", header("cold-start", data, split_spec, config, extra), cols) as w:
        rows = run_cold_start(prep.train, prep.valid, config, args.nc, args.nr, args.cold_seed,
                              on_row=lambda r: w.row([r.n_c, r.n_r, r.train_ratings, r.valid_rmse, r.mean_rmse]))
    worst = max(rows, key=lambda r: r.valid_rmse)
    print(f"worst cell N_c={worst.n_c} n_r={worst.n_r}: {worst.valid_rmse:.4f} (mean predictor {worst.mean_rmse:.4f})")


def cmd_ablation(args, data, split_spec, config, out: Path) -> None:
    prep = prepare(data, split_spec)
    combos = [c.strip() for c in args.combos.split(",") if c.strip()]
    extra = {"ablation_batch": args.ablation_batch, "ablation_seeds": args.ablation_seeds, "combos": ",".join(combos)}
    cols = ["controls", "caching", "seeds", "embeddings_generated", "failed_requests", "cache_hits",
            "evidence_max", "budget_ok"]

    def write(r):
        ev = ";".join(f"d{d}:{n}" for d, n in r.evidence_max.items())
        w.row([r.controls, r.caching, r.seeds, r.embeddings_generated, r.failed_requests, r.cache_hits, ev, r.budget_ok])

    with CsvWriter(out / "ablation.csv", header("ablation", data, split_spec, config, extra), cols) as w:
        run_ablation(prep.train, config.num_proto_users, config.num_proto_items, config.md, config.el or 0,
                     args.ablation_batch, range(args.ablation_seeds), combos, on_row=write)


COMMANDS = {
    "train": cmd_train,
    "compare-pmf": cmd_compare_pmf,
    "online": cmd_online,
    "cold-start": cmd_cold_start,
    "ablation": cmd_ablation,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        data, split_spec, config, out = resolve(args)
        if args.command == "ablation" and config.el is None:
            raise ValueError("the ablation needs a finite --el")
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, data, split_spec, config, out)
    except (DataError, TrainingError, ValueError, OSError) as exc:
        print(f"rec: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
