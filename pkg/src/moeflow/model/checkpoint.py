"""Versioned single-file container for model parameters.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header (sorted keys), then raw C-order array bytes. Nothing
time- or host-dependent is written, so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dit import SparseDiT, SparseDiTConfig

MAGIC = b"MOEFLOW\x00"
FORMAT_VERSION = 1
ROLES = ("teacher", "student", "fake", "disc", "model", "edit")


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for name in sorted(arrays):
            f.write(np.ascontiguousarray(arrays[name]).tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[20 : 20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_model(path, model: SparseDiT, role: str = "model", extra: dict | None = None) -> None:
    if role not in ROLES:
        raise CheckpointError(f"unknown role {role!r}")
    meta = {"kind": "sparse_dit", "role": role, "config": asdict(model.cfg), "extra": extra or {}}
    save_arrays(path, model.params, meta)


def load_model(path, expect_role: str | None = None) -> tuple[SparseDiT, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "sparse_dit":
        raise CheckpointError(f"{path}: not a model checkpoint")
    if expect_role is not None and meta["role"] != expect_role:
        raise CheckpointError(f"{path}: role {meta['role']!r}, expected {expect_role!r}")
    cfg = SparseDiTConfig(**meta["config"])
    return SparseDiT(cfg, arrays), meta
