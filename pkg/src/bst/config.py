"""Run configuration files.

Flat ``key = value`` lines grouped under ``[section]`` headers; ``#`` starts a
comment. Every key belongs to a known section and is typed by the schema
below; unknown keys, duplicates and malformed values are rejected with the
offending line number. Omitted keys take their defaults.
"""

from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .pruner import PruneConfig
from .resmlp import ModelConfig


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _optional_int(text):
    return None if text.lower() in ("none", "") else int(text)


def _str(text):
    return text


def _field(default, parse):
    return field(default=default, metadata={"parse": parse})


@dataclass(frozen=True)
class ModelSection:
    image: tuple = _field((3, 16, 16), _ints)
    patch_size: int = _field(4, int)
    hidden_dim: int = _field(32, int)
    mlp_ratio: int = _field(4, int)
    depth: int = _field(2, int)
    layerscale_init: float = _field(0.1, float)


@dataclass(frozen=True)
class PruneSection:
    sparsity: float = _field(0.0, float)
    block_size: int | None = _field(None, _optional_int)  # None: dense training


@dataclass(frozen=True)
class OptimSection:
    name: str = _field("sgd", _str)
    lr: float = _field(0.05, float)
    momentum: float = _field(0.9, float)
    weight_decay: float = _field(0.0, float)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = _field(5, int)
    batch_size: int = _field(32, int)
    seed: int = _field(0, int)
    eval_batch_size: int = _field(250, int)


@dataclass(frozen=True)
class DataSection:
    source: str = _field("synthetic", _str)  # synthetic | cifar10 | cifar100
    path: str = _field("", _str)
    n: int = _field(5000, int)
    n_test: int = _field(1000, int)
    classes: int = _field(10, int)
    noise: float = _field(1.0, float)
    data_seed: int = _field(0, int)


SECTIONS = {
    "model": ModelSection,
    "prune": PruneSection,
    "optim": OptimSection,
    "train": TrainSection,
    "data": DataSection,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    prune: PruneSection = field(default_factory=PruneSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        if self.optim.name not in ("sgd", "adam"):
            raise ConfigError(f"optim.name must be sgd or adam, got {self.optim.name!r}")
        if self.data.source not in ("synthetic", "cifar10", "cifar100"):
            raise ConfigError(f"data.source must be synthetic, cifar10 or cifar100, got {self.data.source!r}")
        if self.data.source != "synthetic" and not self.data.path:
            raise ConfigError(f"data.path is required for {self.data.source}")
        if self.train.epochs < 1 or self.train.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        self.prune_config()

    def prune_config(self):
        if self.prune.block_size is None:
            return None
        try:
            return PruneConfig(self.prune.sparsity, self.prune.block_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def num_classes(self):
        return {"cifar10": 10, "cifar100": 100}.get(self.data.source, self.data.classes)

    def model_config(self, dtype="float32"):
        m = self.model
        return ModelConfig(image=m.image, patch_size=m.patch_size, hidden_dim=m.hidden_dim, mlp_ratio=m.mlp_ratio,
                           depth=m.depth, num_classes=self.num_classes(), prune=self.prune_config(),
                           layerscale_init=m.layerscale_init, dtype=dtype)

    def with_values(self, **sections):
        """Copy with some keys replaced, e.g. ``with_values(prune={"sparsity": 0.5})``."""
        return replace(self, **{name: replace(getattr(self, name), **vals) for name, vals in sections.items()})

    def as_dict(self):
        return asdict(self)


def parse_config(text, path=None):
    values = {name: {} for name in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno, path)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno, path)
        key, value = (part.strip() for part in line.split("=", 1))
        spec = {f.name: f for f in fields(SECTIONS[section])}
        if key not in spec:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno, path)
        try:
            values[section][key] = spec[key].metadata["parse"](value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {section}.{key}", lineno, path) from None
    try:
        return RunConfig(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})
    except ConfigError as exc:
        raise ConfigError(str(exc), None, path) from None


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return parse_config(text, path=str(path))


def format_config(cfg):
    """Render ``cfg`` back to config text; ``parse_config(format_config(c)) == c``."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, val in asdict(getattr(cfg, name)).items():
            if isinstance(val, (tuple, list)):
                val = ",".join(map(str, val))
            lines.append(f"{key} = {'none' if val is None else val}")
        lines.append("")
    return "\n".join(lines)
