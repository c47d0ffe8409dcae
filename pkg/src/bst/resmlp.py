"""ResMLP-style model: patch embedding, residual MLP blocks, classifier.

Each block is::

    x1 = x  + ls1 * swap(CrossPatch(swap(Affine1(x))))
    y  = x1 + ls2 * Fc2(GELU(Fc1(Affine2(x1))))

where ``swap`` exchanges the patch and channel axes, ``ls1``/``ls2`` are
per-channel scales and every linear layer except the classifier head keeps a
block-pruned copy of its input for the weight gradient.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError, FormatError, ShapeError
from .pruner import PruneConfig, eligible
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    image: tuple = (3, 32, 32)
    patch_size: int = 4
    hidden_dim: int = 64
    mlp_ratio: int = 4
    depth: int = 2
    num_classes: int = 10
    prune: PruneConfig | None = None
    layerscale_init: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        c, h, w = self.image
        if min(c, h, w, self.patch_size, self.hidden_dim, self.mlp_ratio, self.num_classes) < 1:
            raise ConfigError(f"model extents must be positive: {self}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} does not divide image {h}x{w}")

    @property
    def num_patches(self):
        _, h, w = self.image
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def patch_dim(self):
        return self.image[0] * self.patch_size**2


def s12_config(prune=None, num_classes=1000):
    """ResMLP-S12 geometry: 224x224 images, 16x16 patches, D=384, 12 blocks."""
    return ModelConfig(image=(3, 224, 224), patch_size=16, hidden_dim=384, mlp_ratio=4,
                       depth=12, num_classes=num_classes, prune=prune)


def patchify(images, patch_size):
    """``(B, C, H, W) -> (B, P, p*p*C)``; patches in raster order, channels interleaved per pixel."""
    if images.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) images, got {images.shape}")
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide {h}x{w}")
    x = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x.reshape(b, (h // p) * (w // p), p * p * c))


@dataclass(frozen=True)
class CensusItem:
    label: str
    shape: tuple
    itemsize: int
    eligible: bool

    @property
    def nbytes(self):
        return int(np.prod(self.shape)) * self.itemsize


class ResMLP:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params = []
        self._by_name = {}
        rng = Rng(seed)
        d, p, hid = cfg.hidden_dim, cfg.num_patches, cfg.hidden_dim * cfg.mlp_ratio

        def linear_params(name, fan_in, fan_out, std=None):
            w = rng.normal((fan_out, fan_in), std=std if std is not None else fan_in**-0.5, dtype=self.dtype)
            self._add(f"{name}.weight", w)
            self._add(f"{name}.bias", np.zeros(fan_out, self.dtype))

        linear_params("embed", cfg.patch_dim, d)
        for i in range(cfg.depth):
            pre = f"blocks.{i}"
            self._add(f"{pre}.affine1.alpha", np.ones(d, self.dtype))
            self._add(f"{pre}.affine1.beta", np.zeros(d, self.dtype))
            linear_params(f"{pre}.cross_patch", p, p)
            self._add(f"{pre}.ls1", np.full(d, cfg.layerscale_init, self.dtype))
            self._add(f"{pre}.affine2.alpha", np.ones(d, self.dtype))
            self._add(f"{pre}.affine2.beta", np.zeros(d, self.dtype))
            linear_params(f"{pre}.fc1", d, hid)
            linear_params(f"{pre}.fc2", hid, d)
            self._add(f"{pre}.ls2", np.full(d, cfg.layerscale_init, self.dtype))
        self._add("norm.alpha", np.ones(d, self.dtype))
        self._add("norm.beta", np.zeros(d, self.dtype))
        linear_params("head", d, cfg.num_classes, std=0.02)
        for name, _, ok in self.eligibility_report():
            if cfg.prune is not None and not ok:
                log.warning("layer %s stays dense: block size %d does not divide its trailing extent",
                            name, cfg.prune.block_size)

    def _add(self, name, value):
        prm = ag.Param(name, value)
        self.params.append(prm)
        self._by_name[name] = prm

    def __getitem__(self, name):
        return self._by_name[name]

    @property
    def itemsize(self):
        return self.dtype.itemsize

    @property
    def param_count(self):
        return sum(p.data.size for p in self.params)

    def _sparse_layers(self):
        cfg = self.cfg
        yield "embed", cfg.patch_dim
        for i in range(cfg.depth):
            yield f"blocks.{i}.cross_patch", cfg.num_patches
            yield f"blocks.{i}.fc1", cfg.hidden_dim
            yield f"blocks.{i}.fc2", cfg.hidden_dim * cfg.mlp_ratio

    def eligibility_report(self, prune=None):
        """``(layer, trailing extent, prunable)`` for every pruned linear layer."""
        prune = self.cfg.prune if prune is None else prune
        return [(name, t, eligible(t, prune)) for name, t in self._sparse_layers()]

    def activation_census(self, batch_size, prune=None):
        """Every tensor one training step keeps for backward, in forward order."""
        cfg = self.cfg
        b, p, d = batch_size, cfg.num_patches, cfg.hidden_dim
        hid = d * cfg.mlp_ratio
        sz = self.itemsize

        def item(label, shape, trailing=None):
            return CensusItem(label, shape, sz, trailing is not None and eligible(trailing, prune))

        items = [item("embed", (b, p, cfg.patch_dim), cfg.patch_dim)]
        for i in range(cfg.depth):
            pre = f"blocks.{i}"
            items += [
                item(f"{pre}.affine1", (b, p, d)),
                item(f"{pre}.cross_patch", (b, d, p), p),
                item(f"{pre}.ls1", (b, p, d)),
                item(f"{pre}.affine2", (b, p, d)),
                item(f"{pre}.fc1", (b, p, d), d),
                item(f"{pre}.gelu", (b, p, hid)),
                item(f"{pre}.fc2", (b, p, hid), hid),
                item(f"{pre}.ls2", (b, p, d)),
            ]
        items += [
            item("norm", (b, d)),
            item("head", (b, 1, d)),
            item("loss", (b, cfg.num_classes)),
        ]
        return items

    def block(self, tape, x, i):
        pre = f"blocks.{i}"
        prune = self.cfg.prune
        h = ag.affine(tape, x, self[f"{pre}.affine1.alpha"], self[f"{pre}.affine1.beta"], label=f"{pre}.affine1")
        h = ag.swap_last(tape, h)
        h = ag.linear(tape, h, self[f"{pre}.cross_patch.weight"], self[f"{pre}.cross_patch.bias"], prune,
                      label=f"{pre}.cross_patch")
        h = ag.swap_last(tape, h)
        h = ag.affine(tape, h, self[f"{pre}.ls1"], label=f"{pre}.ls1")
        x = ag.add(tape, x, h)
        h = ag.affine(tape, x, self[f"{pre}.affine2.alpha"], self[f"{pre}.affine2.beta"], label=f"{pre}.affine2")
        h = ag.linear(tape, h, self[f"{pre}.fc1.weight"], self[f"{pre}.fc1.bias"], prune, label=f"{pre}.fc1")
        h = ag.gelu(tape, h, label=f"{pre}.gelu")
        h = ag.linear(tape, h, self[f"{pre}.fc2.weight"], self[f"{pre}.fc2.bias"], prune, label=f"{pre}.fc2")
        h = ag.affine(tape, h, self[f"{pre}.ls2"], label=f"{pre}.ls2")
        return ag.add(tape, x, h)

    def embed(self, tape, images):
        patches = ag.Var(patchify(np.asarray(images, dtype=self.dtype), self.cfg.patch_size))
        return ag.linear(tape, patches, self["embed.weight"], self["embed.bias"], self.cfg.prune, label="embed")

    def forward(self, tape, images):
        """Logits for ``images[B, C, H, W]``; records on ``tape`` unless it is None."""
        if tuple(images.shape[1:]) != tuple(self.cfg.image):
            raise ShapeError(f"images {images.shape} do not match model geometry {self.cfg.image}")
        x = self.embed(tape, images)
        for i in range(self.cfg.depth):
            x = self.block(tape, x, i)
        x = ag.mean_pool(tape, x)
        x = ag.affine(tape, x, self["norm.alpha"], self["norm.beta"], label="norm")
        return ag.linear(tape, x, self["head.weight"], self["head.bias"], None, label="head")

    def loss(self, tape, images, labels):
        return ag.cross_entropy(tape, self.forward(tape, images), labels, label="loss")

    def predict(self, images, batch_size=256):
        out = []
        for i in range(0, images.shape[0], batch_size):
            out.append(self.forward(None, images[i:i + batch_size]).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def state(self):
        return {p.name: p.data for p in self.params}

    def load_state(self, state):
        missing = set(self._by_name) - set(state)
        if missing:
            raise FormatError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, value in state.items():
            prm = self._by_name[name]
            if value.shape != prm.data.shape:
                raise FormatError(f"{name}: shape {value.shape} != {prm.data.shape}")
            prm.data = np.ascontiguousarray(value, dtype=self.dtype)
            prm.zero_grad()


def build_model(cfg, seed=0):
    return ResMLP(cfg, seed)


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"BSTCKPT\x00"
_CKPT_VERSION = 1
_DT = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DT_INV = {v: k for k, v in _DT.items()}


def checkpoint_bytes(model):
    parts = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(model.params))]
    for p in model.params:
        name = p.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BB", _DT[p.data.dtype], p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(p.data.astype(p.data.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path):
    """Read a checkpoint into an ordered ``{name: array}`` dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    state = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + n].decode()
            off += 2 + n
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = _DT_INV[code].newbyteorder("<")
            size = int(np.prod(shape))
            state[name] = np.frombuffer(buf, dt, size, off).reshape(shape).astype(_DT_INV[code])
            off += size * dt.itemsize
    except (struct.error, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return state
