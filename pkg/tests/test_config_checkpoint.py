import dataclasses
import struct

import numpy as np
import pytest

from normssl.checkpoint import CheckpointError, load_trainer, read_checkpoint, save_trainer, write_checkpoint
from normssl.config import (
    BYOL_ONLY, SIMCLR_ONLY, ConfigError, ExperimentConfig, PRESETS, apply_overrides, load, parse_text, preset,
)
from normssl.training import Trainer

from conftest import tiny


# -- config ---------------------------------------------------------------------
def test_reference_hyperparameters():
    v = preset("vanilla-bn")
    assert (v.lr, v.weight_decay, v.target_decay, v.warmup_epochs) == (0.2, 1.5e-6, 0.996, 10.0)
    g = preset("gn-ws")
    assert (g.lr, g.weight_decay, g.target_decay, g.groups, g.ws) == (0.24, 3e-8, 0.999, 16, True)
    m = preset("modified-init")
    assert m.warmup_epochs == 50.0 and m.init == "bn-capture-reinit"
    assert (v.ws_eps, v.collapse_std, v.collapse_cos, v.stat_floor) == (1e-4, 1e-3, 0.99, 1e-3)


def test_presets_validate():
    for name in PRESETS:
        assert preset(name).name == name


def test_unknown_preset_and_key():
    with pytest.raises(ConfigError):
        preset("nope")
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), {"lrr": 1})
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), {"epochs": "many"})


@pytest.mark.parametrize("bad", [
    {"objective": "moco"}, {"encoder_norm": "xx"}, {"init": "magic"}, {"batch_size": 1},
    {"widths": "a,b"}, {"dataset": "imagenet"}, {"tau": 0.0}, {"target_decay": 1.5},
    {"init": "bn-capture-reinit", "encoder_norm": "gn", "projector_norm": "gn", "predictor_norm": "gn"},
])
def test_validation(bad):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), bad)


def _perturb(value):
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value + 1
    if isinstance(value, float):
        return value * 0.5 + 0.001
    return None


def test_hash_tracks_semantic_fields():
    base = preset("vanilla-bn")
    skip = {"name"} | SIMCLR_ONLY
    for f in dataclasses.fields(base):
        new = _perturb(getattr(base, f.name))
        if new is None:
            continue
        if f.name == "target_decay":
            new = 0.9
        changed = base.replace(**{f.name: new})
        if f.name in skip:
            assert changed.hash() == base.hash(), f.name
        else:
            assert changed.hash() != base.hash(), f.name
    assert base.replace(name="other").hash() == base.hash()
    assert base.replace(encoder_norm="ln").hash() != base.hash()


def test_simclr_hash_ignores_byol_fields():
    s = preset("simclr-ln")
    for key in BYOL_ONLY - {"predictor", "predictor_norm"}:
        assert s.replace(**{key: not getattr(s, key) if key == "ema_literal" else 0.5}).hash() == s.hash()
    assert s.replace(tau=0.5).hash() != s.hash()


def test_text_round_trip(tmp_path):
    cfg = preset("gn-ws", seed=7, epochs=12)
    assert parse_text(cfg.dumps()) == cfg
    path = tmp_path / "c.txt"
    path.write_text("# comment\npreset = gn-ws\nseed=7\n\nepochs = 12  # trailing\n")
    assert load(path) == dataclasses.replace(cfg, name="gn-ws")
    with pytest.raises(ConfigError):
        parse_text("no equals sign")
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.txt")


def test_aliases_canonicalize():
    assert ExperimentConfig(encoder_norm="BatchNorm").hash() == ExperimentConfig(encoder_norm="bn").hash()


# -- checkpoint files --------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a": rng.standard_normal((2, 3)), "scalar": np.array(4.5), "empty": np.zeros((0, 2))}
    write_checkpoint(tmp_path / "c.bin", {"k": 1}, tensors)
    meta, got = read_checkpoint(tmp_path / "c.bin")
    assert meta == {"k": 1}
    for k, v in tensors.items():
        assert got[k].shape == v.shape and got[k].tobytes() == v.tobytes()


def test_checkpoint_layout(tmp_path):
    write_checkpoint(tmp_path / "c.bin", {}, {"w": np.array([1.0, 2.0])})
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"NSSLCKPT"
    assert struct.unpack_from("<I", raw, 8)[0] == 1
    assert raw[-16:] == struct.pack("<2d", 1.0, 2.0)


def test_checkpoint_rejects_bad_files(tmp_path):
    path = tmp_path / "c.bin"
    write_checkpoint(path, {}, {"w": np.arange(6.0)})
    raw = path.read_bytes()
    (tmp_path / "v.bin").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "v.bin")
    (tmp_path / "m.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "m.bin")
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "t.bin")


def test_checkpoint_detects_edited_config(tmp_path):
    tr = Trainer(tiny(epochs=1))
    save_trainer(tmp_path / "c.bin", tr)
    meta, tensors = read_checkpoint(tmp_path / "c.bin")
    meta["config"] = meta["config"].replace("seed=0", "seed=5")
    write_checkpoint(tmp_path / "c.bin", meta, tensors)
    with pytest.raises(CheckpointError, match="hash"):
        load_trainer(tmp_path / "c.bin")


@pytest.mark.parametrize("name", ["vanilla-bn", "modified-init", "simclr-ln"])
def test_resume_is_trajectory_identical(tmp_path, name):
    cfg = tiny(name, epochs=3)
    full = Trainer(cfg).fit()
    first = Trainer(cfg)
    first.fit(until_epoch=1)
    save_trainer(tmp_path / "c.bin", first)
    resumed = load_trainer(tmp_path / "c.bin")
    rest = resumed.fit()
    assert [vars(m) for m in full] == [vars(m) for m in first.history + rest]
