import struct
import warnings

import numpy as np
import pytest

from gnpm import checkpoint as C
from gnpm.optim import Trainer

from helpers import tiny_config, tiny_dataset


@pytest.fixture
def trained(tmp_path):
    ds = tiny_dataset()
    tr = Trainer(ds, tiny_config(epochs=2))
    tr.run()
    path = tmp_path / "m.ckpt"
    C.save_checkpoint(path, tr)
    return ds, tr, path


def test_roundtrip_exact(trained):
    ds, tr, path = trained
    ck = C.load_checkpoint(path)
    assert ck.config == tr.config and ck.epoch == 2 and ck.step == tr.step
    for name, p in tr.parameters().items():
        assert ck.params[name].tobytes() == p.values.tobytes()
        assert ck.params[name].dtype == p.values.dtype
    assert ck.adam_step == tr.optimizer.state.step
    assert ck.log == tr.log
    assert ck.kind == "cycle"


def test_restore_and_build_model(trained):
    ds, tr, path = trained
    ck = C.load_checkpoint(path)
    back = C.restore_trainer(ck, ds)
    for name, p in tr.parameters().items():
        np.testing.assert_array_equal(back.parameters()[name].values, p.values)
    model, bank = C.build_model(ck)
    x = ds.frames[0].cloud[:30]
    s, p = tr.codes_for_frame(0)
    np.testing.assert_array_equal(model.cycle(x, s, p).x_tilde.values, tr.model.cycle(x, s, p).x_tilde.values)
    np.testing.assert_array_equal(bank.pose_codes.values, tr.bank.pose_codes.values)


def test_restore_rejects_other_dataset(trained):
    _, _, path = trained
    other = tiny_dataset()
    other.sequences[0].split = "heldout_pose"
    with pytest.raises(ValueError):
        C.restore_trainer(C.load_checkpoint(path), other)


@pytest.mark.parametrize("cut", [5, 11, 20, 200, -1])
def test_truncation_is_structured_error(trained, cut):
    _, _, path = trained
    data = path.read_bytes()
    path.write_bytes(data[:cut])
    with pytest.raises(C.CheckpointError) as info:
        C.load_checkpoint(path)
    assert info.value.offset >= 0 and str(path) in str(info.value)


def test_bad_magic_and_version(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACKPT" + struct.pack("<I", 1))
    with pytest.raises(C.CheckpointError, match="magic"):
        C.read_records(p)
    p.write_bytes(C.MAGIC + struct.pack("<I", 99))
    with pytest.raises(C.CheckpointError, match="version"):
        C.read_records(p)


def test_unknown_record_warns_and_is_skipped(trained, tmp_path):
    _, _, path = trained
    records = C.read_records(path)
    records["future/thing"] = np.arange(3, dtype=np.int64)
    out = tmp_path / "extra.ckpt"
    C.write_records(out, records)
    with pytest.warns(UserWarning, match="future/thing"):
        back = C.read_records(out)
    assert "future/thing" not in back


def test_missing_required_record(tmp_path):
    p = tmp_path / "x.ckpt"
    C.write_records(p, {"config": np.zeros(2, dtype=np.uint8)})
    with pytest.raises(C.CheckpointError, match="meta"):
        C.read_records(p)


def test_records_are_little_endian(tmp_path):
    p = tmp_path / "x.ckpt"
    C.write_records(p, {"config": np.zeros(1, np.uint8), "meta": np.zeros(1, np.uint8), "param/w": np.array([1.0], dtype=">f8")})
    raw = p.read_bytes()
    assert np.array([1.0], dtype="<f8").tobytes() in raw
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert C.read_records(p)["param/w"][0] == 1.0


def test_load_parameters_checks_shapes(trained):
    ds, tr, path = trained
    ck = C.load_checkpoint(path)
    bad = dict(ck.params)
    bad["bank.pose"] = bad["bank.pose"][:1]
    with pytest.raises(ValueError):
        C.load_parameters(tr.parameters(), bad)
    del bad["bank.pose"]
    with pytest.raises(ValueError):
        C.load_parameters(tr.parameters(), bad)
