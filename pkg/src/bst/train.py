"""Deterministic training loop.

Everything that is compared across runs (loss CSV, metrics, memory reports,
checkpoint) depends only on the config and seed: data order comes from
``(seed, epoch)``, parameters from the model seed, and every kernel reduces
in a fixed order whatever the thread count. Wall-clock numbers go to the log
only.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field

from . import autograd as ag
from .datasets import batches, load_cifar10, load_cifar100, normalize_split, synth_patches
from .memstat import MemLedger, component_breakdown, savings_report, write_json
from .resmlp import build_model, save_checkpoint

log = logging.getLogger(__name__)

LOSS_SCHEMA = "bst.losses/1"
METRICS_SCHEMA = "bst.metrics/1"


def load_data(cfg):
    """``(train, test)`` datasets for a run config."""
    d = cfg.data
    if d.source == "cifar10":
        return load_cifar10(d.path)
    if d.source == "cifar100":
        return load_cifar100(d.path)
    full = synth_patches(d.data_seed, d.n, d.classes, cfg.model.image, noise=d.noise)
    return normalize_split(full, d.n_test)


def accuracy(model, dataset, batch_size=250):
    return float((model.predict(dataset.images, batch_size) == dataset.labels).mean())


def make_optimizer(cfg, params, ledger=None):
    o = cfg.optim
    if o.name == "adam":
        return ag.Adam(params, o.lr, weight_decay=o.weight_decay, ledger=ledger)
    return ag.SGD(params, o.lr, momentum=o.momentum, weight_decay=o.weight_decay, ledger=ledger)


@dataclass
class RunResult:
    config: object
    losses: list = field(default_factory=list)  # (step, epoch, loss)
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    model: object = None
    ledger: object = None

    def metrics(self):
        return {
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "steps": len(self.losses),
            "final_loss": self.losses[-1][2] if self.losses else None,
            "step0_loss": self.losses[0][2] if self.losses else None,
        }


def train(cfg, data=None):
    """Train a model per ``cfg``; ``data`` may pass preloaded ``(train, test)``."""
    train_set, test_set = data if data is not None else load_data(cfg)
    seed = cfg.train.seed
    model = build_model(cfg.model_config(), seed=seed)
    ledger = MemLedger()
    for p in model.params:
        ledger.alloc("model", p.name, p.data.nbytes)
    opt = make_optimizer(cfg, model.params, ledger)
    result = RunResult(cfg, model=model, ledger=ledger)
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.train.epochs):
        for batch in batches(train_set, cfg.train.batch_size, seed, epoch):
            h_in = ledger.alloc("input", "images", batch.images.nbytes)
            tape = ag.Tape(ledger)
            loss = model.loss(tape, batch.images, batch.labels)
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            ledger.free(h_in)
            result.losses.append((step, epoch, float(loss.data)))
            step += 1
        log.info("epoch %d: loss %.4f (%.1fs)", epoch, result.losses[-1][2] if result.losses else float("nan"),
                 time.perf_counter() - t0)
    if not result.losses:
        raise ValueError(f"batch size {cfg.train.batch_size} exceeds the {len(train_set)} training samples")
    result.train_accuracy = accuracy(model, train_set, cfg.train.eval_batch_size)
    result.test_accuracy = accuracy(model, test_set, cfg.train.eval_batch_size)
    return result


def csv_metadata(schema, payload):
    """The leading ``# {...}`` line every emitted CSV carries."""
    return "# " + json.dumps({"schema": schema, **payload}, sort_keys=True)


def write_losses(path, result):
    with open(path, "w") as fh:
        fh.write(csv_metadata(LOSS_SCHEMA, {"config": result.config.as_dict()}) + "\n")
        fh.write("step,epoch,loss\n")
        for step, epoch, loss in result.losses:
            fh.write(f"{step},{epoch},{loss!r}\n")


def memory_payload(model, ledger, prune, batch_size):
    breakdown = component_breakdown(ledger)
    payload = {"breakdown": breakdown.as_dict()}
    if prune is not None:
        payload["savings"] = savings_report(model, prune, batch_size).as_dict()
    return breakdown, payload


def write_outputs(out_dir, result):
    """Write losses.csv, metrics.json, memory.json, memory.txt and checkpoint.bin."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = result.config
    write_losses(os.path.join(out_dir, "losses.csv"), result)
    write_json(os.path.join(out_dir, "metrics.json"), {"schema": METRICS_SCHEMA, "config": cfg.as_dict(), **result.metrics()})
    prune = cfg.prune_config()
    breakdown, payload = memory_payload(result.model, result.ledger, prune, cfg.train.batch_size)
    write_json(os.path.join(out_dir, "memory.json"), payload)
    text = breakdown.to_text()
    if prune is not None:
        text += "\n\n" + savings_report(result.model, prune, cfg.train.batch_size).to_text()
    with open(os.path.join(out_dir, "memory.txt"), "w") as fh:
        fh.write(text + "\n")
    save_checkpoint(result.model, os.path.join(out_dir, "checkpoint.bin"))


def step0_loss(cfg, data):
    """Loss of the untrained model on the first training batch."""
    train_set, _ = data
    model = build_model(cfg.model_config(), seed=cfg.train.seed)
    batch = next(batches(train_set, cfg.train.batch_size, cfg.train.seed, 0))
    return float(model.loss(ag.Tape(), batch.images, batch.labels).data)


# ---------------------------------------------------------------- grid

GRID_SCHEMA = "bst.grid/1"
ACCEPTABLE_PP = 1.5


def classify(delta_pp):
    """Heatmap class of an accuracy delta (percentage points vs dense)."""
    if delta_pp > 0:
        return "above"
    return "acceptable" if delta_pp >= -ACCEPTABLE_PP else "degraded"


def _run_cell(args):
    cfg, key = args
    r = train(cfg)
    return key, r.test_accuracy, r.metrics()["step0_loss"]


def run_grid(cfg, sparsities, blocks, jobs=1):
    """Dense baseline plus one run per ``(s, b)``; results keyed by cell and merged in key order."""
    cells = [(cfg.with_values(prune={"block_size": None, "sparsity": 0.0}), ("dense",))]
    for s in sparsities:
        for b in blocks:
            cells.append((cfg.with_values(prune={"block_size": int(b), "sparsity": float(s)}), (float(s), int(b))))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_cell, cells))
    else:
        done = [_run_cell(c) for c in cells]
    acc = {key: a for key, a, _ in done}
    base = acc.pop(("dense",))
    return base, {k: acc[k] for k in sorted(acc)}


def write_grid(out_dir, cfg, base, cells, sparsities, blocks):
    """heatmap.csv (rows s, columns b, delta in pp) and cells.csv (long form with class)."""
    os.makedirs(out_dir, exist_ok=True)
    meta = csv_metadata(GRID_SCHEMA, {"config": cfg.as_dict(), "baseline_test_accuracy": base})
    with open(os.path.join(out_dir, "heatmap.csv"), "w") as fh:
        fh.write(meta + "\n")
        fh.write("sparsity," + ",".join(f"b={b}" for b in blocks) + "\n")
        for s in sparsities:
            vals = [100.0 * (cells[(float(s), int(b))] - base) for b in blocks]
            fh.write(f"{s}," + ",".join(f"{v:.2f}" for v in vals) + "\n")
    with open(os.path.join(out_dir, "cells.csv"), "w") as fh:
        fh.write(meta + "\n")
        fh.write("sparsity,block_size,test_accuracy,delta_pp,class\n")
        for (s, b), a in cells.items():
            d = 100.0 * (a - base)
            fh.write(f"{s},{b},{a!r},{d:.4f},{classify(d)}\n")
