"""Binary tensor container used for model, adapter and merged-weight checkpoints.

Layout::

    b"CGCLCKPT" | u32 version | u64 header length | JSON header | raw data

The JSON header holds free-form ``meta`` plus one entry per tensor with its
name, role, shape and byte offset into the data section. Tensor data is
little-endian float64, row-major.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CGCLCKPT"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_tensors(path, tensors, meta: dict | None = None) -> Path:
    """Write ``tensors`` (iterable of ``(name, role, array)``) to ``path``."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, role, arr in tensors:
        data = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        entries.append({"name": name, "role": role, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(meta, {name: (role, array)})``."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a cgclora checkpoint")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    base = start + hlen
    out = {}
    for e in header["tensors"]:
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_LE_F64).astype(np.float64).reshape(e["shape"])
        out[e["name"]] = (e["role"], arr)
    return header["meta"], out


def _model_entries(model, include_base: bool):
    entries = []
    if include_base:
        for name, arr in model.base_weights().items():
            entries.append((f"base.{name}", "base", arr))
    for name, role, t in model.named_trainable():
        entries.append((name, role, t.data))
    return entries


def save_model(model, path, meta: dict | None = None, include_base: bool = True) -> Path:
    info = {
        "kind": "model" if include_base else "adapters",
        "config": model.config.to_dict(),
        "variant": model.variant,
        "ranks": model.layers[next(iter(model.layers))].bank.ranks if model.layers else [],
        "alpha": model.config.adapter.alpha,
        "base_digest": base_digest(model),
    }
    info.update(meta or {})
    return save_tensors(path, _model_entries(model, include_base), info)


def save_adapters(model, path, meta: dict | None = None) -> Path:
    return save_model(model, path, meta, include_base=False)


def load_model(path):
    """Rebuild a model from a checkpoint written by :func:`save_model`."""
    from .model import ModelConfig, build_model

    meta, tensors = load_tensors(path)
    model = build_model(ModelConfig.from_dict(meta["config"]))
    restore(model, tensors)
    return model, meta


def restore(model, tensors: dict) -> None:
    trainable = {name: t for name, _, t in model.named_trainable()}
    for name, (role, arr) in tensors.items():
        if name.startswith("base."):
            key = name[len("base.") :]
            target = model.base_weights().get(key)
            if target is None:
                raise KeyError(f"checkpoint base tensor {key!r} has no slot in the model")
            target[...] = arr
        elif name in trainable:
            trainable[name].data[...] = arr
        else:
            raise KeyError(f"checkpoint tensor {name!r} has no slot in the model")


def base_digest(model) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.base_weights().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    return h.hexdigest()
