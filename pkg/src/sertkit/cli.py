"""Command-line entry points: simulate, sparsify, ingest, train, evaluate, sweep, explain.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
Set ``SERTKIT_LOG_LEVEL`` (e.g. INFO, DEBUG) for progress output.
"""

from __future__ import annotations

import argparse
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .data import SimulationSpec, Split, ingest_csv, simulate_series, sparsify, write_csv
from .errors import ConfigError, DataError, NumericalError
from .evaluation import (
    DEFAULT_LEVELS,
    NAIVE,
    MetricsTable,
    forward_fill,
    importance_index,
    naive_forecast,
    rmse_per_variable,
    series_means,
    sparsity_sweep,
)
from .fileio import write_json, write_text
from .model import Checkpoint, ModelConfig, embed_batch, make_batch, predict, sstann_forward
from .pipeline import (
    DataConfig,
    RunConfig,
    check_vocab,
    choose_split,
    format_config,
    materialize,
    prepare,
    resolve_config,
    train_on_table,
    windows_summary,
)
from .seeding import stream
from .tensor import no_grad
from .training import TrainConfig

log = logging.getLogger("sertkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path: Path, command: str, args: argparse.Namespace, config: dict, seeds: dict, inputs: list, outputs: list, started: float) -> None:
    """Record everything needed to replay a command next to its outputs."""
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": _version(),
        "duration_sec": round(time.perf_counter() - started, 3),
    }
    write_json(path, manifest)


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def _read_table(path: Path):
    if not path.exists():
        raise DataError(f"{path}: no such file")
    table, report = ingest_csv(path)
    if report.skipped:
        log.info("%s: skipped %d rows with missing values", path, report.skipped)
    return table, report


def _overrides(pairs: list[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    spec = SimulationSpec(n_steps=args.steps, seed=args.seed)
    table = simulate_series(spec)
    write_csv(table, args.out)
    write_manifest(_manifest_path(args.out), "simulate", args, asdict(spec), {"seed": args.seed}, [], [args.out], started)
    print(f"wrote {len(table)} records to {args.out}")
    return EXIT_OK


def cmd_sparsify(args) -> int:
    started = time.perf_counter()
    table, _ = _read_table(args.data)
    out = sparsify(table, args.rate, stream(args.seed, "sparsify"))
    write_csv(out, args.out)
    write_manifest(_manifest_path(args.out), "sparsify", args, {"rate": args.rate}, {"seed": args.seed}, [args.data], [args.out], started)
    print(f"kept {len(out)} of {len(table)} records -> {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    started = time.perf_counter()
    table, report = _read_table(args.data)
    write_csv(table, args.out)
    write_manifest(_manifest_path(args.out), "ingest", args, asdict(report), {}, [args.data], [args.out], started)
    print(f"{len(table)} records ({report.skipped} rows skipped, {report.duplicates} duplicates) -> {args.out}")
    return EXIT_OK


def _contributions_csv(ckpt: Checkpoint, windows) -> str:
    """Per-observation contributions of the test windows, long format."""
    lines = ["anchor,location,hour,variable,target,contribution"]
    cfg, vocab = ckpt.config, ckpt.vocab
    for s in range(0, len(windows), 128):
        chunk = windows[s:s + 128]
        batch = make_batch(chunk, ckpt.stats, cfg)
        with no_grad():
            _, contrib, _ = sstann_forward(embed_batch(batch, ckpt.params, cfg), ckpt.params, cfg)
        for b, w in enumerate(chunk):
            loc = "" if w.location is None else vocab.locations[w.location]
            for i in range(len(w)):
                for k, target in enumerate(vocab.names):
                    lines.append(f"{w.anchor},{loc},{w.anchor - cfg.lookback + int(w.t[i])},{vocab.names[w.f[i]]},{target},{float(contrib.data[b, i, k])!r}")
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    started = time.perf_counter()
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    flat = resolve_config(args.config, overrides)
    table, _ = _read_table(args.data)
    out: Path = args.out
    ckpt_path = out / "checkpoint.json"

    def on_improve(epoch, ckpt):
        ckpt.save(ckpt_path)

    ckpt, result, prep, run = train_on_table(table, args.model, flat, on_improve=on_improve)
    ckpt.save(ckpt_path)
    lines = ["epoch,train_loss,val_loss,sec_per_epoch"]
    lines += [f"{r.epoch},{float(r.train_loss)!r},{float(r.val_loss)!r},{r.sec_per_epoch:.3f}" for r in result.reports]
    write_text(out / "losses.csv", "\n".join(lines) + "\n")
    outputs = [ckpt_path, out / "losses.csv"]
    test = prep.windows["test"]
    if test:
        metrics = _score(ckpt, table, test, prep.split)
        metrics.save(out / f"metrics_{args.model}_test")
        outputs.append(out / f"metrics_{args.model}_test.csv")
    if args.model == "sstann" and test:
        write_text(out / "contributions.csv", _contributions_csv(ckpt, test))
        outputs.append(out / "contributions.csv")
    config = {**run.to_flat(), "windows": windows_summary(prep), "best_epoch": result.best_epoch}
    write_text(out / "config.resolved.txt", format_config(run.to_flat()))
    write_manifest(out / "manifest.json", "train", args, config, {"seed": run.train.seed}, [args.data], outputs, started)
    print(f"best epoch {result.best_epoch}; checkpoint -> {ckpt_path}")
    return EXIT_OK


def _score(ckpt: Checkpoint, table, test, split: Split) -> MetricsTable:
    pred = predict(ckpt.kind, test, ckpt.params, ckpt.config, ckpt.stats)
    metrics = rmse_per_variable(pred, test, ckpt.vocab.names, ckpt.kind)
    filled = forward_fill(table, series_means(table, split.train), table.time_range())
    metrics.rows = rmse_per_variable(naive_forecast(filled, test, ckpt.vocab), test, ckpt.vocab.names, NAIVE).rows + metrics.rows
    metrics.metadata = {"test_windows": len(test), "test_range": list(split.test)}
    return metrics


def _checkpoint_split(ckpt: Checkpoint, table) -> Split:
    if "split" in ckpt.meta:
        s = ckpt.meta["split"]
        return Split(tuple(s["train"]), tuple(s["val"]), tuple(s["test"]))
    return choose_split(table, DataConfig())


def _load_checkpoint(path: Path) -> Checkpoint:
    if not path.exists():
        raise DataError(f"{path}: no such checkpoint")
    return Checkpoint.load(path)


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    ckpt = _load_checkpoint(args.checkpoint)
    table, _ = _read_table(args.data)
    check_vocab(table, ckpt.vocab)
    split = _checkpoint_split(ckpt, table)
    run = RunConfig(model=ckpt.config)
    prep = prepare(table, run, ckpt.vocab, split, stats=ckpt.stats, parts=("test",))
    if not prep.windows["test"]:
        raise DataError("test range yields no windows")
    metrics = _score(ckpt, table, prep.windows["test"], split)
    stem = args.out / f"metrics_{ckpt.kind}_test"
    metrics.save(stem)
    write_manifest(args.out / "manifest.json", "evaluate", args, asdict(ckpt.config), {}, [args.checkpoint, args.data], [Path(f"{stem}.csv")], started)
    print(metrics.to_text(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    levels = [float(x) for x in args.levels.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    spec = SimulationSpec(n_steps=args.steps)
    base = {"lookback": 10, "horizon": 1, "location_mode": "A"}
    flat = resolve_config(args.config, _overrides(args.set), base=base)
    flat["n_targets"] = flat["n_targets"] or spec.n_series
    flat["n_max"] = flat["n_max"] or flat["lookback"] * spec.n_series
    flat["train_steps"] = args.train_steps
    mc = ModelConfig(**{k: flat[k] for k in asdict(ModelConfig())}).validate()
    tc = TrainConfig(**{k: flat[k] for k in asdict(TrainConfig())}).validate()
    if not args.train_steps < args.steps:
        raise ConfigError("--train-steps must be smaller than --steps")
    runs = sparsity_sweep(spec, levels, models, seeds, mc, tc, args.train_steps, args.out)
    outputs = sorted(str(p) for p in args.out.glob("*.csv"))
    write_manifest(args.out / "manifest.json", "sweep", args, flat, {"seeds": seeds}, [], outputs, started)
    for run in runs:
        print(f"level {run.level:g} seed {run.seed}: " + ", ".join(f"{m}={run.metrics.overall(m):.4f}" for m in run.metrics.models()))
    return EXIT_OK


def cmd_explain(args) -> int:
    started = time.perf_counter()
    ckpt = _load_checkpoint(args.checkpoint)
    if ckpt.kind != "sstann":
        raise ConfigError(
            f"checkpoint is a {ckpt.kind.upper()} model; importance needs SST-ANN, whose predictions "
            "split exactly into per-observation contributions"
        )
    table, _ = _read_table(args.data)
    check_vocab(table, ckpt.vocab)
    split = _checkpoint_split(ckpt, table)
    prep = prepare(table, RunConfig(model=ckpt.config), ckpt.vocab, split, stats=ckpt.stats, parts=(args.part,))
    windows = prep.windows[args.part]
    if not windows:
        raise DataError(f"{args.part} range yields no windows")
    names = lambda s: [x.strip() for x in s.split(",") if x.strip()] if s else None  # noqa: E731
    try:
        report = importance_index(ckpt.kind, ckpt.params, ckpt.config, ckpt.vocab, ckpt.stats, windows, names(args.predictors), names(args.targets))
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    stem = args.out / "importance"
    report.save(stem)
    write_manifest(args.out / "manifest.json", "explain", args, asdict(ckpt.config), {}, [args.checkpoint, args.data], [Path(f"{stem}.csv")], started)
    print(report.to_text(), end="")
    return EXIT_OK


# -- wiring ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sertkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate the 16-series synthetic dataset as CSV")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=40_000)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sparsify", help="delete a fraction of records uniformly at random")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--rate", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_sparsify)

    s = sub.add_parser("ingest", help="validate a long-format CSV and write it in canonical form")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="fit SERT or SST-ANN and write a checkpoint")
    s.add_argument("--model", choices=("sert", "sstann"), required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="per-variable test RMSE of a checkpoint and the naive baseline")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="sparsity sweep on simulated data")
    s.add_argument("--levels", default=",".join(f"{x:g}" for x in DEFAULT_LEVELS))
    s.add_argument("--models", default="sert,sstann")
    s.add_argument("--seeds", default="0")
    s.add_argument("--steps", type=int, default=40_000)
    s.add_argument("--train-steps", type=int, default=37_000)
    s.add_argument("--config", type=Path)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("explain", help="signed variable importance from an SST-ANN checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--predictors", help="comma-separated predictor variables (default: all)")
    s.add_argument("--targets", help="comma-separated target variables (default: all)")
    s.add_argument("--part", choices=("train", "val", "test"), default="test")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_explain)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SERTKIT_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
