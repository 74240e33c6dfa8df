import json

import numpy as np
import pytest

from vapipe.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from vapipe.cnn import CNN, CNNSpec
from vapipe.errors import CheckpointKindError, DataError
from vapipe.optim import TrainConfig
from vapipe.recurrent import RNN, RnnSpec


def _models():
    yield CNN(CNNSpec(image_size=16, filters=(4, 8, 8), fc_units=12), seed=3)
    yield CNN(CNNSpec(head="classification", image_size=16, filters=(2, 2, 2), fc_units=5), seed=1)
    yield RNN(RnnSpec(cell="gru", layers=(100, 100, 50), input_dim=7, window=4), seed=2)
    yield RNN(RnnSpec(cell="simple", layers=(100,), input_dim=3, window=2), seed=0)


@pytest.mark.parametrize("model", list(_models()), ids=["cnn", "cnn-cls", "gru3", "simple1"])
def test_roundtrip_bit_exact(tmp_path, model):
    save_checkpoint(tmp_path / "a.val", model, TrainConfig(batch_size=128))
    back = load_checkpoint(tmp_path / "a.val")
    assert type(back) is type(model) and back.spec == model.spec
    assert list(back.params) == list(model.params)
    for k in model.params:
        assert back.params[k].tobytes() == model.params[k].tobytes()
    save_checkpoint(tmp_path / "b.val", back, TrainConfig(batch_size=128))
    assert (tmp_path / "a.val").read_bytes() == (tmp_path / "b.val").read_bytes()


def test_header_layout(tmp_path):
    m = RNN(RnnSpec(cell="gru", layers=(100, 100, 50), input_dim=5, window=3), seed=0)
    save_checkpoint(tmp_path / "c.val", m, TrainConfig(batch_size=128))
    raw = (tmp_path / "c.val").read_bytes()
    assert raw[:4] == b"VAL1"
    n = int.from_bytes(raw[4:8], "little")
    header = json.loads(raw[8:8 + n])
    assert header["layers"] == [100, 100, 50] and header["kind"] == "rnn"
    assert header["train"]["batch_size"] == 128 and header["train"]["lr"] == 0.01
    spec, params = read_checkpoint(tmp_path / "c.val")
    assert params["l0.Wz"].shape == (100, 5) and params["l0.Wz"].dtype == np.float32


def test_kind_mismatch_and_corruption(tmp_path):
    save_checkpoint(tmp_path / "r.val", RNN(RnnSpec(layers=(100,), input_dim=2, window=2)))
    with pytest.raises(CheckpointKindError):
        load_checkpoint(tmp_path / "r.val", expect="cnn")
    raw = (tmp_path / "r.val").read_bytes()
    (tmp_path / "t.val").write_bytes(raw[:-10])
    with pytest.raises(DataError, match="truncated"):
        read_checkpoint(tmp_path / "t.val")
    (tmp_path / "m.val").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        read_checkpoint(tmp_path / "m.val")
    with pytest.raises(DataError):
        read_checkpoint(tmp_path / "missing.val")
