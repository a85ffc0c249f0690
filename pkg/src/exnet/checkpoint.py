"""Self-describing binary checkpoint.

Layout::

    b"EXNETCKPT\\n"                 10-byte magic
    uint64 little-endian            length H of the JSON header
    H bytes                         UTF-8 JSON header (sorted keys)
    tensor payload                  float64 little-endian, C order, concatenated

The header holds ``format_version``, the model type, model/loss sections,
the run config, the entity keys in id order, and one entry per tensor with
``name``, ``shape``, ``dtype`` (always ``"<f8"``), ``offset`` and ``nbytes``
relative to the start of the payload. Nothing time-dependent is written, so
identical models give identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import LossConfig, ModelConfig, _build
from .core import SeededRng
from .data import EntityIndex

MAGIC = b"EXNETCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, index: EntityIndex, run_config: dict | None = None):
    from dataclasses import asdict

    state = model.get_state()
    tensors, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        blob = arr.tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "model_type": model.cfg.type,
        "num_entities": model.num_entities,
        "num_features": model.num_features,
        "model": asdict(model.cfg),
        "loss": asdict(model.loss_cfg),
        "config": run_config,
        "entity_keys": list(index.keys),
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path):
    """Return ``(header, {name: array})`` without building a model."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an ExNet checkpoint")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = memoryview(data)[start + hlen:]
    arrays = {}
    for t in header["tensors"]:
        if t["dtype"] != "<f8":
            raise CheckpointError(f"{path}: unsupported dtype {t['dtype']}")
        buf = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(buf) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {t['name']!r}")
        arrays[t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path):
    """Return ``(model, entity_index, header)``."""
    from .train import build_model

    header, arrays = read_checkpoint(path)
    model_cfg = _build(ModelConfig, header["model"], "model")
    loss_cfg = _build(LossConfig, header["loss"], "loss")
    model = build_model(model_cfg, loss_cfg, header["num_entities"], header["num_features"], SeededRng(0))
    expected = set(model.get_state())
    if expected != set(arrays):
        raise CheckpointError(f"{path}: tensor set does not match the architecture")
    model.set_state(arrays)
    return model, EntityIndex(header["entity_keys"]), header
