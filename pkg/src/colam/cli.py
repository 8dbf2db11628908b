"""Command-line entry point: ``colam {train,sweep,expected-accuracy,analyze,grad-check}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from ._seeding import substream
from .analysis import write_analysis
from .data import DataError, NormStats, normalize_dataset
from .labels import SoftLabelTable, one_hot
from .nn import Batch, Network, grad_check, load_params
from .training import (METHODS, ConfigError, TrainConfig, prepare_dataset, run_method, train_with_table,
                       write_run)

log = logging.getLogger("colam")

OUT_ENV = "COLAM_OUT"
SCALAR_FLAGS = {
    "stages": int, "epochs_per_stage": int, "temperature": float, "peers": int, "batch_size": int,
    "lr": float, "lr_decay": float, "momentum": float, "weight_decay": float, "epsilon": float,
    "alpha": float, "beta": float, "augment": bool, "normalize": bool, "deterministic": bool,
}


class CommandError(RuntimeError):
    pass


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or ".")


def load_config(args) -> TrainConfig:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError([f"config: file {path} does not exist"])
    config = TrainConfig.load(path)
    overrides = {"seed": args.seed, "method": getattr(args, "method", None)}
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        key = key.replace("-", "_")
        if key not in SCALAR_FLAGS:
            raise ConfigError([f"--set {key}: not an overridable scalar field"])
        try:
            overrides[key] = _parse_bool(value) if SCALAR_FLAGS[key] is bool else SCALAR_FLAGS[key](value)
        except ValueError as exc:
            raise ConfigError([f"--set {key}: {exc}"]) from None
    try:
        return config.with_overrides(**overrides)
    except TypeError as exc:
        raise ConfigError([str(exc)]) from None


def _run_id(config: TrainConfig) -> str:
    return f"{config.method}-s{config.seed}-{config.config_hash()[:8]}"


def load_run(run_dir) -> tuple:
    """(config, dataset) for an existing run directory, reusing persisted normalization stats."""
    run_dir = Path(run_dir)
    if not (run_dir / "config.json").is_file():
        raise CommandError(f"{run_dir} is not a run directory (config.json missing)")
    config = TrainConfig.load(run_dir / "config.json")
    raw = replace(config, normalize=False)
    ds, _ = prepare_dataset(raw)
    if config.normalize:
        stats_path = run_dir / "normalization.json"
        ds, _ = normalize_dataset(ds, NormStats.load(stats_path) if stats_path.is_file() else None)
    return config, ds


def _verify_run(run_dir: Path, record) -> None:
    net = load_params(run_dir / "params_final.bin")
    if not all(np.array_equal(a, b) for a, b in zip(net.parameters(), record.net.parameters())):
        raise CommandError(f"{run_dir}/params_final.bin does not round-trip")
    for table in record.soft_labels:
        back = SoftLabelTable.load(run_dir / f"softlabels_stage{table.stage}.csv")
        if not np.array_equal(back.probs, table.probs):
            raise CommandError(f"soft-label checkpoint for stage {table.stage} does not round-trip")


def cmd_train(args) -> int:
    config = load_config(args)
    run_dir = _out_root(args) / "runs" / (args.run_id or _run_id(config))
    if run_dir.exists():
        raise CommandError(f"run directory {run_dir} already exists; refusing to modify it")
    ds, stats = prepare_dataset(config)
    record = run_method(config, ds)
    record.norm_stats = stats
    write_run(record, config, run_dir)
    _verify_run(run_dir, record)
    print(f"run_dir={run_dir}")
    print(f"top1={record.final_test_top1:.17g}")
    return 0


def _sweep_cells(doc: dict) -> List[dict]:
    problems = []
    grids = {}
    for key in ("intervals", "peers", "temperatures", "seeds"):
        values = doc.get(key)
        if not isinstance(values, list) or not values:
            problems.append(f"{key}: must be a nonempty list")
        grids[key] = values or []
    if problems:
        raise ConfigError(problems)
    return [{"interval": t, "peers": k, "temperature": T, "seed": s}
            for t in grids["intervals"] for k in grids["peers"] for T in grids["temperatures"] for s in grids["seeds"]]


def cell_config(base: TrainConfig, cell: dict, total_epochs: int) -> TrainConfig:
    """COLAM config for one grid cell: ``interval`` epochs per stage, as many stages as fit."""
    t = int(cell["interval"])
    return replace(base, method="colam", epochs_per_stage=t, stages=max(1, total_epochs // t),
                   peers=int(cell["peers"]), temperature=float(cell["temperature"]),
                   seed=int(cell["seed"])).validate()


def _run_cell(payload):
    config_doc, cell_dir = payload
    config = TrainConfig.from_dict(config_doc)
    ds, stats = prepare_dataset(config)
    record = run_method(config, ds)
    record.norm_stats = stats
    cell_dir = Path(cell_dir)
    if cell_dir.exists():
        # left behind by an interrupted sweep; the cell is recomputed from scratch
        for f in cell_dir.iterdir():
            f.unlink()
        cell_dir.rmdir()
    write_run(record, config, cell_dir)
    return record.final_test_top1


def cmd_sweep(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError([f"config: file {path} does not exist"])
    doc = json.loads(path.read_text())
    base = TrainConfig.from_dict(doc.get("base", {}))
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    cells = _sweep_cells(doc)
    total = int(doc.get("total_epochs", base.total_epochs))
    sweep_hash = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    sweep_dir = _out_root(args) / "sweeps" / (args.run_id or f"sweep-{sweep_hash[:8]}")
    sweep_dir.mkdir(parents=True, exist_ok=True)
    grid_path = sweep_dir / "grid.csv"
    done = set()
    if grid_path.exists():
        with open(grid_path) as f:
            done = {row["cell_hash"] for row in csv.DictReader(l for l in f if not l.startswith("#"))}
    else:
        grid_path.write_text(f"# sweep_hash={sweep_hash}\ninterval,peers,T,seed,top1,cell_hash\n")
    todo = []
    for cell in cells:
        config = cell_config(base, cell, total)
        h = config.config_hash()
        if h not in done:
            todo.append((cell, config, h))
            done.add(h)
    log.info("sweep %s: %d cells, %d to run", sweep_dir, len(cells), len(todo))
    payloads = [(c.to_dict(), str(sweep_dir / "cells" / h)) for _, c, h in todo]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = pool.map(_run_cell, payloads)
            _append_rows(grid_path, todo, results)
    else:
        _append_rows(grid_path, todo, map(_run_cell, payloads))
    print(f"grid={grid_path}")
    return 0


def _append_rows(grid_path: Path, todo, results) -> None:
    for (cell, config, h), top1 in zip(todo, results):
        with open(grid_path, "a") as f:
            f.write(f"{cell['interval']},{cell['peers']},{config.temperature:.17g},{cell['seed']},{top1:.17g},{h}\n")


def cmd_expected_accuracy(args) -> int:
    run_dir = Path(args.run)
    config, ds = load_run(run_dir)
    expected = [run_dir / f"softlabels_stage{k}.csv" for k in range(1, config.stages + 1)]
    missing = [str(p) for p in expected if not p.is_file()]
    if missing:
        raise CommandError("missing soft-label checkpoints: " + ", ".join(missing))
    out_dir = _out_root(args) / "analysis" / run_dir.name
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash={config.config_hash()}", "stage,expected_accuracy"]
    for path in expected:
        table = SoftLabelTable.load(path)
        acc = train_with_table(table, config, ds).final_test_top1
        print(f"stage={table.stage} expected_accuracy={acc:.17g}")
        lines.append(f"{table.stage},{acc:.17g}")
    out = out_dir / "expected_accuracy.csv"
    out.write_text("\n".join(lines) + "\n")
    print(f"csv={out}")
    return 0


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    config, ds = load_run(run_dir)
    net = load_params(run_dir / "params_final.bin")
    class_ids = [int(c) for c in args.classes.split(",")] if args.classes else None
    if ds.num_classes < 3:
        log.warning("fewer than 3 classes: projection skipped, distances still written")
    out_dir = _out_root(args) / "analysis" / run_dir.name
    written = write_analysis(net, ds, out_dir, config.method, class_ids, comment=f"config_hash={config.config_hash()}")
    for name, path in written.items():
        print(f"{name}={path}")
    return 0


def cmd_grad_check(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rng = substream(args.seed, "grad-check")
    net = Network.init(sizes, rng)
    for layer in net.layers:
        layer.bias[:] = 0.1 * rng.standard_normal(layer.bias.shape)
    x = rng.standard_normal((args.samples, sizes[0]))
    y = one_hot(rng.integers(0, sizes[-1], size=args.samples), sizes[-1])
    report = grad_check(net, Batch(x, y), args.temperature, args.step, args.tolerance)
    print(f"params={report.num_checked} max_rel_error={report.max_rel_error:.3e} "
          f"worst={report.worst_index} passed={report.passed}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colam", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or the current directory)")
        p.add_argument("--seed", type=int)
        p.add_argument("--run-id")

    p = sub.add_parser("train", help="train one model and write a run directory")
    common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--set", action="append", metavar="FIELD=VALUE", help="override a scalar config field")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over update interval, peer count and temperature")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("expected-accuracy", help="retrain from every soft-label checkpoint of a COLAM run")
    common(p, config=False)
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_expected_accuracy)

    p = sub.add_parser("analyze", help="template / representation geometry of a finished run")
    common(p, config=False)
    p.add_argument("--run", required=True)
    p.add_argument("--classes", help="three comma-separated class ids for the projection")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("grad-check", help="compare backprop with central differences")
    p.add_argument("--sizes", default="16,32,4")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--temperature", type=float, default=1.5)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (CommandError, DataError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
