"""``bst`` command line: tables, kernel benchmark, training, grid search, memory reports."""

import argparse
import contextlib
import json
import logging
import sys

from . import bench as bench_mod
from .config import load_config
from .errors import BstError, ConfigError, IngestionError
from .memstat import component_breakdown, dry_run_ledger, savings_report, write_json
from .resmlp import build_model
from .train import csv_metadata, run_grid, train, write_grid, write_outputs


def _floats(text):
    return [float(v) for v in text.split(",")]


def _ints(text):
    return [int(v) for v in text.split(",")]


def _open_out(path):
    return contextlib.nullcontext(sys.stdout) if path in (None, "-") else open(path, "w")


def cmd_overhead_table(args):
    table = bench_mod.overhead_table(args.rows, args.cols, args.blocks, args.sparsities)
    with _open_out(args.out) as fh:
        fh.write(csv_metadata("bst.overhead/1", {"rows": args.rows, "cols": args.cols, "blocks": args.blocks,
                                                 "sparsities": args.sparsities, "units": "percent"}) + "\n")
        fh.write("sparsity_percent," + ",".join(f"b={b}" for b in args.blocks) + "\n")
        for s, row in table.items():
            fh.write(f"{100 * s:g}," + ",".join(bench_mod.format_table_cell(row[b]) for b in args.blocks) + "\n")
    return 0


def cmd_bench(args):
    rows = bench_mod.bench(tuple(args.shape), args.blocks, args.sparsities, args.reps, args.seed)
    with _open_out(args.out) as fh:
        fh.write(csv_metadata("bst.bench/1", {"shape": args.shape, "blocks": args.blocks,
                                              "sparsities": args.sparsities, "reps": args.reps,
                                              "seed": args.seed}) + "\n")
        fh.write("kind,block_size,sparsity,median_seconds,macs_executed,macs_dense_equivalent,"
                 "blocks_processed,dense_equivalent_gmacs\n")
        for r in rows:
            fh.write(f"{r.kind},{r.block_size},{r.sparsity},{r.median_seconds:.6f},{r.macs_executed},"
                     f"{r.macs_dense_equivalent},{r.blocks_processed},{r.dense_equivalent_gmacs:.3f}\n")
    return 0


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_values(train={"seed": args.seed})
    return cfg


def cmd_train(args):
    cfg = _config(args)
    result = train(cfg)
    write_outputs(args.out, result)
    print(json.dumps(result.metrics(), sort_keys=True))
    return 0


def cmd_grid(args):
    cfg = _config(args)
    base, cells = run_grid(cfg, args.sparsities, args.blocks, args.jobs)
    write_grid(args.out, cfg, base, cells, args.sparsities, args.blocks)
    print(json.dumps({"baseline_test_accuracy": base, "cells": len(cells)}))
    return 0


def cmd_memory_report(args):
    cfg = load_config(args.config)
    batch = args.batch_size or cfg.train.batch_size
    model = build_model(cfg.model_config())
    prune = cfg.prune_config()
    ledger = dry_run_ledger(model, batch, prune, optimizer=cfg.optim.name)
    breakdown = component_breakdown(ledger)
    payload = {"batch_size": batch, "breakdown": breakdown.as_dict()}
    print(f"batch size {batch}, parameters {model.param_count}")
    print(breakdown.to_text())
    if prune is not None:
        report = savings_report(model, prune, batch)
        payload["savings"] = report.as_dict()
        print()
        print(report.to_text())
    if args.json:
        write_json(args.json, payload)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="bst", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("overhead-table", help="BSR overhead over ideal compression (percent)")
    t.add_argument("--rows", type=int, default=bench_mod.TABLE_ROWS)
    t.add_argument("--cols", type=int, default=bench_mod.TABLE_COLS)
    t.add_argument("--blocks", type=_ints, default=list(bench_mod.TABLE_BLOCKS))
    t.add_argument("--sparsities", type=_floats, default=list(bench_mod.TABLE_SPARSITIES),
                   help="fractions in [0, 1]")
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_overhead_table)

    b = sub.add_parser("bench", help="BSpMM timing against the dense product")
    b.add_argument("--shape", type=_ints, default=list(bench_mod.BENCH_SHAPE), help="B,P,D")
    b.add_argument("--blocks", type=_ints, default=list(bench_mod.BENCH_BLOCKS))
    b.add_argument("--sparsities", type=_floats, default=list(bench_mod.BENCH_SPARSITIES))
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="-")
    b.set_defaults(func=cmd_bench)

    tr = sub.add_parser("train", help="train one model from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    g = sub.add_parser("grid", help="dense baseline plus a sparsity x block-size grid")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--sparsities", type=_floats, default=[0.3, 0.5, 0.7, 0.9])
    g.add_argument("--blocks", type=_ints, default=[4, 8, 16])
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_grid)

    m = sub.add_parser("memory-report", help="analytic memory breakdown and savings, no training")
    m.add_argument("--config", required=True)
    m.add_argument("--batch-size", type=int)
    m.add_argument("--json")
    m.set_defaults(func=cmd_memory_report)
    return p


def _error_payload(exc):
    out = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        out.update(line=exc.line, path=exc.path)
    if isinstance(exc, IngestionError):
        out.update(path=exc.path, offset=exc.offset)
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BstError, OSError, ValueError) as exc:
        sys.stderr.write(json.dumps(_error_payload(exc)) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
