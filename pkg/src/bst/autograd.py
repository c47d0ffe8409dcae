"""Minimal reverse-mode autodiff over dense arrays.

Ops record themselves on a :class:`Tape` in execution order together with the
context they save for backward. ``Tape.backward`` walks the records in exact
reverse order, hands each record its saved context once, then drops it and
releases the matching ledger entries. Passing ``tape=None`` to an op runs it
forward only.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TapeError
from .memstat import record_activation
from .sparse_ops import SavedActivation, sparse_linear_backward, sparse_linear_forward

GELU_C = math.sqrt(2.0 / math.pi)


class Var:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"


class Param(Var):
    __slots__ = ("name",)

    def __init__(self, name, value):
        super().__init__(np.ascontiguousarray(value), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape})"


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Var
    backward: object
    ctx: dict | None
    handles: list = field(default_factory=list)
    n_saved_activations: int = 0


class Tape:
    """One training step's record of ops, optionally logging saved tensors to a ledger."""

    def __init__(self, ledger=None):
        self.nodes = []
        self.ledger = ledger
        self.live_saved = 0
        self.peak_saved = 0
        self._spent = False

    def record(self, op, inputs, out_data, backward, ctx, saves=()):
        out = Var(out_data, requires_grad=any(v.requires_grad for v in inputs))
        if not out.requires_grad:
            return out
        if self._spent:
            raise TapeError("tape already consumed by backward")
        node = Node(op, tuple(inputs), out, backward, ctx)
        for label, obj in saves:
            if isinstance(obj, SavedActivation):
                node.n_saved_activations += 1
                if self.ledger is not None:
                    node.handles.append(record_activation(self.ledger, label, obj))
            elif self.ledger is not None:
                node.handles.append(self.ledger.alloc("activations", label, obj.nbytes))
        self.live_saved += node.n_saved_activations
        self.peak_saved = max(self.peak_saved, self.live_saved)
        self.nodes.append(node)
        return out

    def backward(self, loss):
        if self._spent:
            raise TapeError("backward called twice on the same tape")
        if not self.nodes or loss is not self.nodes[-1].output:
            raise TapeError("backward before forward: loss is not this tape's terminal output")
        if loss.data.size != 1:
            raise TapeError("loss must be a scalar")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is not None:
                grads = node.backward(node.ctx, g)
                for inp, gi in zip(node.inputs, grads):
                    if gi is None or not inp.requires_grad:
                        continue
                    if inp.grad is None:
                        inp.grad = gi
                    else:
                        inp.grad = inp.grad + gi
            node.ctx = None
            if self.ledger is not None:
                for hnd in node.handles:
                    self.ledger.free(hnd)
            self.live_saved -= node.n_saved_activations
            node.output.grad = None


def _record(tape, op, inputs, out, backward, ctx, saves=()):
    if tape is None:
        return Var(out)
    return tape.record(op, inputs, out, backward, ctx, saves)


# ---------------------------------------------------------------- ops


def linear(tape, x, weight, bias, cfg=None, label="linear"):
    """Dense-forward linear layer whose saved input is block-pruned per ``cfg``.

    ``x`` may be ``(B, P, Din)`` or ``(B, Din)``; the weight gradient only
    sees the pruned copy.
    """
    data = x.data
    flat = data.ndim == 2
    x3 = data[:, None, :] if flat else data
    y, saved = sparse_linear_forward(x3, weight.data, None if bias is None else bias.data, cfg if tape is not None else None)
    if tape is None:
        saved = None
    if flat:
        y = y[:, 0, :]

    def backward(ctx, g):
        g3 = g[:, None, :] if flat else g
        dx, dw, db = sparse_linear_backward(np.ascontiguousarray(g3), ctx["saved"], weight.data)
        if flat:
            dx = dx[:, 0, :]
        return dx, dw, (None if bias is None else db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(tape, "linear", inputs, y, backward, {"saved": saved}, [(label, saved)] if saved is not None else ())


def affine(tape, x, alpha, beta=None, label="affine"):
    """Per-channel ``alpha * x + beta`` over the last axis (``beta=None`` gives a pure scale)."""
    if alpha.data.shape != (x.data.shape[-1],):
        raise ShapeError(f"alpha {alpha.data.shape} does not match channels of {x.data.shape}")
    y = x.data * alpha.data
    if beta is not None:
        y = y + beta.data
    axes = tuple(range(x.data.ndim - 1))

    def backward(ctx, g):
        dx = g * alpha.data
        dalpha = (g * ctx["x"]).sum(axis=axes)
        return (dx, dalpha) if beta is None else (dx, dalpha, g.sum(axis=axes))

    inputs = (x, alpha) if beta is None else (x, alpha, beta)
    return _record(tape, "affine", inputs, y, backward, {"x": x.data}, [(label, x.data)])


def gelu_forward(x):
    inner = GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x):
    t = np.tanh(GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)


def gelu(tape, x, label="gelu"):
    """GELU, tanh approximation."""
    return _record(
        tape, "gelu", (x,), gelu_forward(x.data),
        lambda ctx, g: (g * gelu_grad(ctx["x"]),),
        {"x": x.data}, [(label, x.data)],
    )


def add(tape, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _record(tape, "add", (a, b), a.data + b.data, lambda ctx, g: (g, g), None)


def swap_last(tape, x):
    """``(B, P, D) -> (B, D, P)``."""
    y = np.ascontiguousarray(x.data.transpose(0, 2, 1))
    return _record(tape, "swap", (x,), y, lambda ctx, g: (np.ascontiguousarray(g.transpose(0, 2, 1)),), None)


def total(tape, x):
    """Sum of all elements, as a scalar."""
    return _record(tape, "total", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype),
                   lambda ctx, g: (np.full_like(x.data, g),), None)


def mean_pool(tape, x):
    """Mean over the patch axis, ``(B, P, D) -> (B, D)``."""
    p = x.data.shape[1]

    def backward(ctx, g):
        return (np.repeat(g[:, None, :] / np.asarray(p, dtype=g.dtype), p, axis=1),)

    return _record(tape, "mean_pool", (x,), x.data.mean(axis=1), backward, None)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(tape, logits, labels, label="cross_entropy"):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    data = logits.data
    labels = np.asarray(labels)
    if data.ndim != 2 or labels.shape != (data.shape[0],):
        raise ShapeError(f"logits {data.shape} / labels {labels.shape} mismatch")
    if labels.size and (labels.min() < 0 or labels.max() >= data.shape[1]):
        raise ValueError(f"labels must lie in [0, {data.shape[1]})")
    z = data - data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(data.shape[0])
    loss = (lse - z[rows, labels]).mean(dtype=data.dtype)
    probs = np.exp(z - lse[:, None])

    def backward(ctx, g):
        d = ctx["probs"].copy()
        d[rows, labels] -= 1
        return (d * (g / np.asarray(data.shape[0], dtype=data.dtype)),)

    return _record(tape, "cross_entropy", (logits,), np.asarray(loss, dtype=data.dtype), backward,
                   {"probs": probs}, [(label, probs)])


# ---------------------------------------------------------------- optimizers


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (``v = mu*v + g + wd*w``)."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, ledger=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = {}
        if ledger is not None and momentum:
            for p in self.params:
                ledger.alloc("optimizer", f"{p.name}.momentum", p.data.nbytes)

    @property
    def slots(self):
        return 1 if self.momentum else 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        dt = self.params[0].data.dtype if self.params else np.float32
        lr, mu, wd = (np.asarray(v, dtype=dt) for v in (self.lr, self.momentum, self.weight_decay))
        for p in self.params:
            g = p.grad + wd * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf = self.state.get(p.name)
                buf = g.copy() if buf is None else mu * buf + g
                self.state[p.name] = buf
                g = buf
            p.data = p.data - lr * g


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, ledger=None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        if ledger is not None:
            for p in self.params:
                ledger.alloc("optimizer", f"{p.name}.adam", 2 * p.data.nbytes)

    slots = 2

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            dt = p.data.dtype
            g = p.grad + dt.type(self.weight_decay) * p.data if self.weight_decay else p.grad
            m = dt.type(b1) * self.m[p.name] + dt.type(1 - b1) * g
            v = dt.type(b2) * self.v[p.name] + dt.type(1 - b2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            step = (m / dt.type(c1)) / (np.sqrt(v / dt.type(c2)) + dt.type(self.eps))
            p.data = p.data - dt.type(self.lr) * step
