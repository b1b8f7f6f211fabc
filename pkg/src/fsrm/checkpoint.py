"""Binary checkpoint container.

Layout: magic ``FSRM``, format version (u32 LE), length-prefixed UTF-8 JSON
config blob, u32 record count, then tensor records: length-prefixed name,
dtype tag (u8: 0=float32, 1=float64), rank (u32), extents (u32 each),
row-major little-endian payload. Readers reject unknown versions.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"FSRM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_checkpoint(path, config: dict, tensors: list[tuple[str, np.ndarray]]):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(config, separators=(",", ":"), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", _TAGS[arr.dtype]))
        buf.write(struct.pack("<I", arr.ndim))
        for e in arr.shape:
            buf.write(struct.pack("<I", e))
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(view):
            raise CheckpointError("checkpoint truncated")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4))
    config = json.loads(bytes(take(blob_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (tag,) = struct.unpack("<B", take(1))
        if tag not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype tag {tag}")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        dt = _DTYPES[tag]
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(n_items * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.copy()
    return config, tensors


def save_model(path, model, optimizer=None):
    """Serialize a model (and optionally optimizer moments) to one file."""
    from .lstm import LstmClassifier

    kind = "lstm" if isinstance(model, LstmClassifier) else "fsrm"
    config = {"kind": kind, "model": model.cfg.to_dict(), "optimizer": None}
    tensors = [(name, t.data) for name, t in model.parameters()]
    if optimizer is not None:
        config["optimizer"] = {"step": optimizer.step_count}
        tensors += [(f"adam.m.{n}", m) for n, m in optimizer.named_moments("m")]
        tensors += [(f"adam.v.{n}", v) for n, v in optimizer.named_moments("v")]
    write_checkpoint(path, config, tensors)


def load_model(path, dtype=np.float32):
    """Rebuild the stored model; returns (model, config_blob, tensors)."""
    from .lstm import LstmClassifier, LstmConfig
    from .model import FSRM, ModelConfig

    config, tensors = read_checkpoint(path)
    kind = config.get("kind")
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    if kind == "fsrm":
        model = FSRM(ModelConfig.from_dict(config["model"]), dtype=dtype)
    elif kind == "lstm":
        model = LstmClassifier(LstmConfig.from_dict(config["model"]), dtype=dtype)
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    model.load_parameters(params)
    return model, config, tensors
