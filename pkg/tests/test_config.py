import pytest

from bst.config import RunConfig, format_config, load_config, parse_config
from bst.errors import ConfigError

TEXT = """
# tiny run
[model]
image = 3, 8, 8
depth = 1   # one block

[prune]
sparsity = 0.5
block_size = 4
"""


def test_parse_and_defaults():
    cfg = parse_config(TEXT)
    assert cfg.model.image == (3, 8, 8) and cfg.model.depth == 1
    assert cfg.prune_config().block_size == 4
    assert cfg.train == RunConfig().train
    assert cfg.model_config().prune.sparsity == 0.5


def test_round_trip():
    cfg = parse_config(TEXT)
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize("text,line", [
    ("[model]\ndepth = two\n", 2),
    ("[nope]\n", 1),
    ("[model]\n\nwidth = 3\n", 3),
    ("depth = 1\n", 1),
    ("[model]\ndepth = 1\ndepth = 2\n", 3),
    ("[model]\njunk\n", 2),
    ("[model\n", 1),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, path="x.cfg")
    assert exc.value.line == line
    assert str(exc.value).startswith(f"x.cfg:{line}: ")


def test_semantic_errors():
    with pytest.raises(ConfigError):
        parse_config("[optim]\nname = lbfgs\n")
    with pytest.raises(ConfigError):
        parse_config("[prune]\nsparsity = 1.5\nblock_size = 4\n")
    with pytest.raises(ConfigError):
        parse_config("[data]\nsource = cifar10\n")
    with pytest.raises(ConfigError):
        load_config("/definitely/missing.cfg")


def test_dense_when_no_block_size():
    assert parse_config("[prune]\nsparsity = 0.9\n").prune_config() is None
