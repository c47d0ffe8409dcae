import numpy as np
import pytest

from bst import autograd as ag
from bst.errors import ConfigError, FormatError
from bst.memstat import MemLedger, savings_report
from bst.pruner import PruneConfig
from bst.resmlp import ModelConfig, build_model, load_checkpoint, patchify, s12_config, save_checkpoint

from gradcheck import check_params

TINY = ModelConfig(image=(3, 8, 8), patch_size=4, hidden_dim=32, mlp_ratio=4, depth=2, num_classes=5)


def images(seed, n, cfg):
    return np.random.default_rng(seed).standard_normal((n, *cfg.image)).astype(cfg.dtype)


def test_patchify_layouts():
    img = np.arange(2 * 4 * 4, dtype=np.float32).reshape(1, 2, 4, 4)
    whole = patchify(img, 4)
    assert whole.shape == (1, 1, 32)
    # channels of each pixel are adjacent
    assert whole[0, 0, :4].tolist() == [0, 16, 1, 17]
    gray = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert patchify(gray, 1)[0, :, 0].tolist() == [1, 2, 3, 4]


def test_identity_projection_embedding():
    cfg = ModelConfig(image=(1, 2, 2), patch_size=1, hidden_dim=1, depth=0, num_classes=2)
    m = build_model(cfg)
    m["embed.weight"].data[:] = 1
    img = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert m.embed(None, img).data[0, :, 0].tolist() == [1, 2, 3, 4]


def test_s12_geometry():
    cfg = s12_config()
    assert cfg.num_patches == 196
    assert 14.5e6 <= build_model(cfg).param_count <= 15.5e6


def test_depth_zero():
    cfg = ModelConfig(image=(3, 8, 8), patch_size=4, hidden_dim=8, depth=0, num_classes=3)
    names = [p.name for p in build_model(cfg).params]
    assert names == ["embed.weight", "embed.bias", "norm.alpha", "norm.beta", "head.weight", "head.bias"]


def test_invalid_config():
    with pytest.raises(ConfigError):
        ModelConfig(image=(3, 10, 10), patch_size=4)


def test_zero_branch_block_is_identity():
    m = build_model(TINY, seed=3)
    for name in ("blocks.0.cross_patch.weight", "blocks.0.cross_patch.bias", "blocks.0.fc2.weight", "blocks.0.fc2.bias"):
        m[name].data[:] = 0
    x = ag.Var(np.random.default_rng(0).standard_normal((2, TINY.num_patches, 32)).astype(np.float32))
    assert np.array_equal(m.block(None, x, 0).data, x.data)


def test_block_s0_equals_dense_block():
    x = images(1, 3, TINY)
    labels = np.array([0, 1, 2])
    runs = []
    for prune in (None, PruneConfig(0.0, 4)):
        from dataclasses import replace
        m = build_model(replace(TINY, prune=prune), seed=5)
        tape = ag.Tape()
        loss = m.loss(tape, x, labels)
        tape.backward(loss)
        runs.append((loss.data, [p.grad for p in m.params]))
    assert np.array_equal(runs[0][0], runs[1][0])
    for a, b in zip(runs[0][1], runs[1][1]):
        assert np.array_equal(a, b)


def test_full_model_finite_differences():
    from dataclasses import replace
    cfg = replace(TINY, dtype="float64", prune=PruneConfig(0.0, 4))
    m = build_model(cfg, seed=11)
    x, labels = images(2, 3, cfg), np.array([0, 3, 4])
    tape = ag.Tape()
    tape.backward(m.loss(tape, x, labels))
    analytic = {p.name: p.grad.copy() for p in m.params}
    worst = check_params(lambda: float(m.loss(None, x, labels).data), m.params, analytic, per_param=20)
    assert max(worst.values()) <= 1e-2, worst


def test_eligibility_report():
    cfg = s12_config(prune=PruneConfig(0.8, 64))
    report = build_model(cfg).eligibility_report()
    by_name = {n: ok for n, _, ok in report}
    assert by_name["embed"] and by_name["blocks.0.fc1"] and by_name["blocks.11.fc2"]
    assert not by_name["blocks.0.cross_patch"]  # 196 patches, 64 does not divide


def test_census_matches_tape_ledger():
    from dataclasses import replace
    for prune in (None, PruneConfig(0.5, 4), PruneConfig(0.9, 8)):
        cfg = replace(TINY, prune=prune)
        m = build_model(cfg, seed=2)
        ledger = MemLedger()
        tape = ag.Tape(ledger)
        loss = m.loss(tape, images(3, 4, cfg), np.arange(4))
        live = ledger.live("activations")
        census = m.activation_census(4, prune)
        assert [e.label for e in live] == [c.label for c in census]
        assert sum(e.nbytes for e in live) == savings_report(m, prune, 4).compressed_bytes
        assert tape.peak_saved == len(m.eligibility_report()) + 1  # pruned linears + dense head
        tape.backward(loss)
        assert ledger.current["activations"] == 0


def test_checkpoint_round_trip(tmp_path):
    m = build_model(TINY, seed=4)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(m, path)
    state = load_checkpoint(path)
    assert list(state) == [p.name for p in m.params]
    other = build_model(TINY, seed=99)
    other.load_state(state)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(m.params, other.params))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_one_train_step_cifar_tiny():
    cfg = ModelConfig(image=(3, 32, 32), patch_size=4, hidden_dim=64, depth=2, num_classes=10,
                      prune=PruneConfig(0.5, 8))
    m = build_model(cfg)
    opt = ag.SGD(m.params, lr=0.05)
    x, labels = images(0, 4, cfg), np.arange(4)
    tape = ag.Tape()
    loss = m.loss(tape, x, labels)
    tape.backward(loss)
    opt.step()
    assert float(m.loss(None, x, labels).data) < float(loss.data)
