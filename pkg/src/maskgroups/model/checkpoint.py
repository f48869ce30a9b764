"""Checkpoint archive: a JSON manifest followed by raw tensor payloads.

Layout::

    uint64 little-endian  header length in bytes
    header                UTF-8 JSON: tensors [(name, shape, dtype, offset)] + meta
    payload               concatenated little-endian IEEE-754 arrays

Offsets are relative to the start of the payload. Optimizer moments are stored
as ordinary tensors named ``adam.m.<param>`` and ``adam.v.<param>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import SchemaError
from .selector import ModelParams, TrainConfig, Vocab
from .train import OptimizerState

FORMAT = "maskgroups-checkpoint"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def dumps_checkpoint(params: ModelParams, state: Optional[OptimizerState] = None, dtype: Optional[str] = None) -> bytes:
    """Serialize; ``dtype`` defaults to the precision the model runs in."""
    if dtype is None:
        dtype = "f32" if params.cfg.dtype == "float32" else "f64"
    if dtype not in _DTYPES:
        raise SchemaError(f"dtype must be one of {sorted(_DTYPES)}")
    arrays = [(name, params.tensors[name]) for name in params.names()]
    if state is not None:
        arrays += [(f"adam.m.{k}", v) for k, v in state.m.items()]
        arrays += [(f"adam.v.{k}", v) for k, v in state.v.items()]
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "vocab": params.vocab.words,
        "config": {f.name: getattr(params.cfg, f.name) for f in fields(TrainConfig)},
        "feature_dim": params.feature_dim,
        "optimizer": None if state is None else {"step": state.step, "total_steps": state.total_steps},
    }
    header = json.dumps(
        {"format": FORMAT, "version": VERSION, "tensors": entries, "meta": meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads_checkpoint(blob: bytes) -> tuple[ModelParams, Optional[OptimizerState]]:
    if len(blob) < 8:
        raise SchemaError("checkpoint shorter than its length prefix")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if 8 + hlen > len(blob):
        raise SchemaError("checkpoint header is truncated")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"unreadable checkpoint header: {exc}") from None
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise SchemaError("not a maskgroups checkpoint (format/version mismatch)")
    payload = memoryview(blob)[8 + hlen :]
    expected = 0
    tensors = {}
    for e in header["tensors"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise SchemaError(f"unknown dtype {e['dtype']!r}")
        if e["offset"] != expected:
            raise SchemaError(f"tensor {e['name']!r} offset {e['offset']} is not contiguous")
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if expected + n > len(payload):
            raise SchemaError("checkpoint payload is truncated")
        tensors[e["name"]] = np.frombuffer(payload[expected : expected + n], dtype=dt).reshape(e["shape"])
        expected += n
    if expected != len(payload):
        raise SchemaError(f"payload has {len(payload)} bytes, manifest describes {expected}")
    meta = header["meta"]
    known = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in meta["config"].items() if k in known})
    tensors = {k: v.astype(np.dtype(cfg.dtype)) for k, v in tensors.items()}
    params = ModelParams(
        {k: v for k, v in tensors.items() if not k.startswith("adam.")},
        Vocab(meta["vocab"]),
        cfg,
        int(meta["feature_dim"]),
    )
    state = None
    if meta.get("optimizer") is not None:
        opt = meta["optimizer"]
        state = OptimizerState(
            step=int(opt["step"]),
            m={k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")},
            v={k[7:]: v for k, v in tensors.items() if k.startswith("adam.v.")},
            total_steps=int(opt["total_steps"]),
        )
    return params, state


def save_checkpoint(path, params: ModelParams, state: Optional[OptimizerState] = None, dtype: Optional[str] = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(params, state, dtype))


def load_checkpoint(path) -> tuple[ModelParams, Optional[OptimizerState]]:
    return loads_checkpoint(Path(path).read_bytes())
