"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"VAL1"
    spec_len, spec_json[spec_len]          # model spec (+ "train" config), UTF-8 JSON, sorted keys
    repeated until EOF:
        name_len, name[name_len], rank, extent[rank], float32le[prod(extent)]

Values are stored at 32-bit precision, so a float32 model round-trips
bit-exactly.
"""
import dataclasses
import json
import struct

import numpy as np

from .cnn import CNN, CNNSpec
from .errors import CheckpointKindError, DataError
from .recurrent import RNN, RnnSpec

MAGIC = b"VAL1"
_U32 = struct.Struct("<I")


def _spec_bytes(spec_dict):
    return json.dumps(spec_dict, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model, train_config=None):
    """Write ``model``; ``train_config`` (a dataclass) is stored in the header
    under ``"train"`` so the run can be reproduced from the file alone."""
    spec = model.spec.to_dict()
    if train_config is not None:
        spec["train"] = dataclasses.asdict(train_config)
    blob = _spec_bytes(spec)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(len(blob)))
        fh.write(blob)
        for name, arr in model.params.items():
            nb = name.encode("utf-8")
            fh.write(_U32.pack(len(nb)))
            fh.write(nb)
            fh.write(_U32.pack(arr.ndim))
            for e in arr.shape:
                fh.write(_U32.pack(e))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Returns ``(spec_dict, params)`` with params as float32 arrays in file order."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        (v,) = _U32.unpack_from(data, pos)
        pos += 4
        return v

    n = u32()
    try:
        spec = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    if not isinstance(spec, dict):
        raise DataError(f"{path}: corrupt checkpoint header")
    pos += n
    params = {}
    while pos < len(data):
        n = u32()
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(data):
            raise DataError(f"{path}: truncated tensor {name!r}")
        params[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    return spec, params


def load_checkpoint(path, expect=None):
    """Load a CNN or RNN. ``expect`` ('cnn' or 'rnn') raises
    CheckpointKindError on mismatch."""
    spec, params = read_checkpoint(path)
    spec.pop("train", None)
    kind = spec.get("kind")
    if expect is not None and kind != expect:
        raise CheckpointKindError(f"{path}: expected a {expect} checkpoint, got {kind}")
    if kind == "cnn":
        return CNN(CNNSpec.from_dict(spec), params)
    if kind == "rnn":
        return RNN(RnnSpec.from_dict(spec), params)
    raise DataError(f"{path}: unknown model kind {kind!r}")
