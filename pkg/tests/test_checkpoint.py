import json
import zipfile

import pytest
import torch

from vsl.checkpoint import (apply_parameters, load_checkpoint,
                            model_config_from_dict, model_config_to_dict,
                            restore_model, save_checkpoint)
from vsl.errors import DataError, ShapeError
from vsl.seeding import make_generator
from vsl.trainer import OptimizerState

from conftest import build_model, small_model_config, train_state_dict


def test_roundtrip_is_bit_exact(tmp_path):
    model = build_model(small_model_config(), seed=11)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, metadata={"epochs_done": 3})
    restored = restore_model(load_checkpoint(path))
    before = train_state_dict(model)
    after = train_state_dict(restored)
    assert before.keys() == after.keys()
    for name in before:
        assert torch.equal(before[name], after[name]), name


def test_roundtrip_preserves_forward(tmp_path):
    model = build_model(small_model_config(), seed=12)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    restored = restore_model(load_checkpoint(path))
    x = torch.rand(2, 30, 30, 30, generator=make_generator(13)).round()
    pa, _ = model(x, deterministic=True)
    pb, _ = restored(x, deterministic=True)
    assert torch.equal(pa, pb)


def test_metadata_and_config_roundtrip(tmp_path):
    cfg = small_model_config()
    model = build_model(cfg, seed=14)
    path = tmp_path / "m.ckpt"
    meta = {"epochs_done": 7, "best_val": 123.5, "seed": 14}
    save_checkpoint(path, model, metadata=meta)
    ckpt = load_checkpoint(path)
    for key, val in meta.items():
        assert ckpt.metadata[key] == val
    assert ckpt.model_config == cfg
    assert ckpt.with_regressor is True


def test_optimizer_state_roundtrip(tmp_path):
    model = build_model(small_model_config(), seed=15)
    opt = OptimizerState.for_model(model)
    gen = make_generator(16)
    for name in opt.m:
        opt.m[name] = torch.randn(opt.m[name].shape, generator=gen)
        opt.v[name] = torch.rand(opt.v[name].shape, generator=gen)
    opt.step = 42
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, optimizer=opt)
    ckpt = load_checkpoint(path)
    assert ckpt.optimizer_step == 42
    assert set(ckpt.optimizer_m) == set(opt.m)
    for name in opt.m:
        assert torch.equal(ckpt.optimizer_m[name], opt.m[name])
        assert torch.equal(ckpt.optimizer_v[name], opt.v[name])


def test_no_regressor_flag_roundtrip(tmp_path):
    model = build_model(small_model_config(), seed=17, with_regressor=False)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    ckpt = load_checkpoint(path)
    assert ckpt.with_regressor is False
    restored = restore_model(ckpt)
    assert restored.regressor is None


def test_config_dict_roundtrip():
    cfg = small_model_config()
    assert model_config_from_dict(model_config_to_dict(cfg)) == cfg


def test_config_dict_rejects_junk():
    with pytest.raises(DataError):
        model_config_from_dict({"grid_side": 30})
    d = model_config_to_dict(small_model_config())
    d["encoder_kernels"] = "nope"
    with pytest.raises(DataError):
        model_config_from_dict(d)


def _corrupt(path, mutate):
    """Rewrite the checkpoint zip with one member replaced."""
    with zipfile.ZipFile(path) as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    mutate(members)
    with zipfile.ZipFile(path, "w") as zf:
        for name, data in members.items():
            zf.writestr(name, data)


def test_truncated_blob_rejected(tmp_path):
    model = build_model(small_model_config(), seed=18)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)

    def chop(members):
        members["blob.bin"] = members["blob.bin"][:-4]

    _corrupt(path, chop)
    with pytest.raises(DataError, match="blob"):
        load_checkpoint(path)


def test_bad_manifest_version_rejected(tmp_path):
    model = build_model(small_model_config(), seed=19)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)

    def bump(members):
        man = json.loads(members["manifest.json"])
        man["format_version"] = 99
        members["manifest.json"] = json.dumps(man).encode()

    _corrupt(path, bump)
    with pytest.raises(DataError, match="version"):
        load_checkpoint(path)


def test_missing_member_rejected(tmp_path):
    model = build_model(small_model_config(), seed=20)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)

    def drop(members):
        del members["blob.bin"]

    _corrupt(path, drop)
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_not_a_zip_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_apply_mismatch_leaves_model_untouched(tmp_path):
    donor = build_model(small_model_config(), seed=21)
    target = build_model(small_model_config(n_local=3), seed=22)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, donor)
    ckpt = load_checkpoint(path)
    before = train_state_dict(target)
    with pytest.raises(ShapeError):
        apply_parameters(target, ckpt.tensors)
    after = train_state_dict(target)
    for name in before:
        assert torch.equal(before[name], after[name]), name


def test_apply_unknown_name_rejected(tmp_path):
    model = build_model(small_model_config(), seed=23)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    ckpt = load_checkpoint(path)
    ckpt.tensors["made.up.weight"] = torch.zeros(3)
    with pytest.raises(ShapeError, match="made.up.weight"):
        apply_parameters(model, ckpt.tensors)
