"""Logical memory accounting.

Allocations are logged by component (input / model / optimizer /
activations) from tensor shapes rather than intercepted from an allocator.
The ledger is the sink for live training and for analytic dry runs alike, so
breakdowns for both come out of the same code.
"""

import json
import threading
from dataclasses import asdict, dataclass, field

from .bsr import prune_count

COMPONENTS = ("input", "model", "optimizer", "activations")
MIB = 2**20
SCHEMA = "bst.memory/1"


@dataclass
class Entry:
    tag: str
    label: str
    nbytes: int
    dense_bytes: int
    start: int
    end: int | None = None


class MemLedger:
    """Append-only allocation log; safe for concurrent writers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._clock = 0
        self.entries = []
        self.current = dict.fromkeys(COMPONENTS, 0)
        self.peak = dict.fromkeys(COMPONENTS, 0)
        self.peak_total = 0

    def alloc(self, tag, label, nbytes, dense_bytes=None):
        if tag not in COMPONENTS:
            raise ValueError(f"unknown component {tag!r}")
        if nbytes < 0:
            raise ValueError("allocation size must be >= 0")
        with self._lock:
            self._clock += 1
            handle = len(self.entries)
            self.entries.append(Entry(tag, label, int(nbytes), int(nbytes if dense_bytes is None else dense_bytes), self._clock))
            self.current[tag] += int(nbytes)
            self.peak[tag] = max(self.peak[tag], self.current[tag])
            self.peak_total = max(self.peak_total, sum(self.current.values()))
            return handle

    def free(self, handle):
        with self._lock:
            entry = self.entries[handle]
            if entry.end is not None:
                raise ValueError(f"double free of {entry.label!r}")
            self._clock += 1
            entry.end = self._clock
            self.current[entry.tag] -= entry.nbytes

    def live(self, tag=None):
        return [e for e in self.entries if e.end is None and (tag is None or e.tag == tag)]


def record_activation(ledger, label, saved):
    """Log a saved activation at its stored size, keeping the dense size alongside."""
    return ledger.alloc("activations", label, saved.stored_bytes, saved.dense_bytes)


@dataclass
class Breakdown:
    peak_bytes: dict
    percent: dict
    total_bytes: int

    def as_dict(self):
        return {
            "total_bytes": self.total_bytes,
            "total_mib": self.total_bytes / MIB,
            "components": {
                c: {"bytes": self.peak_bytes[c], "mib": self.peak_bytes[c] / MIB, "percent": self.percent[c]}
                for c in COMPONENTS
            },
        }

    def to_text(self):
        lines = [f"{'component':<12}{'MiB':>12}{'%':>8}"]
        for c in COMPONENTS:
            lines.append(f"{c:<12}{self.peak_bytes[c] / MIB:>12.1f}{self.percent[c]:>8.1f}")
        lines.append(f"{'total':<12}{self.total_bytes / MIB:>12.1f}{100.0:>8.1f}")
        return "\n".join(lines)


def component_breakdown(ledger):
    """Peak bytes and share per component."""
    if not ledger.entries:
        raise ValueError("empty ledger")
    peak = dict(ledger.peak)
    total = sum(peak.values())
    if total == 0:
        raise ValueError("ledger holds no bytes")
    return Breakdown(peak, {c: 100.0 * peak[c] / total for c in COMPONENTS}, total)


@dataclass
class LayerSavings:
    label: str
    dense_bytes: int
    compressed_bytes: int
    eligible: bool


@dataclass
class SavingsReport:
    layers: list = field(default_factory=list)
    dense_bytes: int = 0
    compressed_bytes: int = 0

    @property
    def saved_bytes(self):
        return self.dense_bytes - self.compressed_bytes

    @property
    def saved_percent(self):
        return 100.0 * self.saved_bytes / self.dense_bytes

    @property
    def delta_bytes(self):
        """Change in activation bytes; negative means memory saved."""
        return -self.saved_bytes

    @property
    def delta_percent(self):
        return -self.saved_percent

    @property
    def eligible_fraction(self):
        return sum(l.dense_bytes for l in self.layers if l.eligible) / self.dense_bytes

    def as_dict(self):
        return {
            "dense_bytes": self.dense_bytes,
            "dense_mib": self.dense_bytes / MIB,
            "compressed_bytes": self.compressed_bytes,
            "compressed_mib": self.compressed_bytes / MIB,
            "delta_bytes": self.delta_bytes,
            "delta_mib": self.delta_bytes / MIB,
            "delta_percent": self.delta_percent,
            "eligible_fraction": self.eligible_fraction,
            "layers": [asdict(l) for l in self.layers],
        }

    def to_text(self):
        lines = [f"{'layer':<28}{'dense MiB':>12}{'stored MiB':>12}  eligible"]
        for l in self.layers:
            lines.append(f"{l.label:<28}{l.dense_bytes / MIB:>12.2f}{l.compressed_bytes / MIB:>12.2f}  {'yes' if l.eligible else 'no'}")
        lines.append(
            f"activations: {self.dense_bytes / MIB:.1f} MiB dense -> {self.compressed_bytes / MIB:.1f} MiB "
            f"(delta {self.delta_bytes / MIB:+.1f} MiB, {self.delta_percent:+.1f}%)"
        )
        return "\n".join(lines)


def pruned_bytes(shape, prune, itemsize=4, index_bytes=4):
    """Stored size of a ``(B, P, D)`` activation after per-sample top-k block pruning.

    Assumes no retained block happens to be all-zero, so this is an upper
    bound on what encoding real data yields.
    """
    bsz, p, d = shape
    n = p * d // prune.block_size
    nnzb = bsz * (n - prune_count(prune.sparsity, n))
    return nnzb * prune.block_size * itemsize + (nnzb + bsz * p + 1) * index_bytes


def savings_report(model, prune_cfg, batch_size):
    """Analytic dense vs stored activation bytes per saved tensor of one training step."""
    report = SavingsReport()
    for item in model.activation_census(batch_size, prune_cfg):
        stored = pruned_bytes(item.shape, prune_cfg, item.itemsize) if item.eligible else item.nbytes
        report.layers.append(LayerSavings(item.label, item.nbytes, stored, item.eligible))
        report.dense_bytes += item.nbytes
        report.compressed_bytes += stored
    return report


def dry_run_ledger(model, batch_size, prune_cfg, optimizer="adam"):
    """Ledger of one analytic training step: every saved tensor is live at the peak."""
    ledger = MemLedger()
    c, h, w = model.cfg.image
    ledger.alloc("input", "images", batch_size * c * h * w * model.itemsize)
    for p in model.params:
        ledger.alloc("model", p.name, p.data.nbytes)
    n_state = {"adam": 2, "sgd": 1}[optimizer]
    for p in model.params:
        ledger.alloc("optimizer", p.name, n_state * p.data.nbytes)
    handles = [
        ledger.alloc("activations", layer.label, layer.compressed_bytes, layer.dense_bytes)
        for layer in savings_report(model, prune_cfg, batch_size).layers
    ]
    for hnd in reversed(handles):
        ledger.free(hnd)
    return ledger


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump({"schema": SCHEMA, **payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")
