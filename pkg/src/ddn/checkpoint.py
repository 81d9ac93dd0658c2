"""Versioned binary checkpoint container.

Layout: magic "DDNCKPT1", u32-LE manifest byte length, canonical-JSON
manifest (config, names, shapes, optimizer hyperparameters, counters, step),
then the raw little-endian float32 value blob of every parameter in manifest
order, then the optimizer m/v blobs in the same order. Loading and re-saving
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import AdamState, Parameter

MAGIC = b"DDNCKPT1"


class CheckpointError(ValueError):
    pass


def _canonical(manifest):
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_state(path, meta, params, states):
    """Write parameters + optimizer states under a caller-supplied meta dict."""
    manifest = {
        "meta": meta,
        "params": [
            {"name": p.name, "shape": list(p.shape), "slot_axis": p.slot_axis}
            for p in params
        ],
        "opt": [
            {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "t": s.t}
            for s in states
        ],
    }
    blob = _canonical(manifest)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p.value.data, dtype="<f4").tobytes())
        for s in states:
            f.write(np.ascontiguousarray(s.m, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.v, dtype="<f4").tobytes())


def load_state(path):
    """Read a checkpoint; returns (meta, params, states)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (mlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + mlen:
        raise CheckpointError(f"{path}: truncated manifest ({len(raw)} bytes)")
    manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    offset = 12 + mlen

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated blob at byte {offset}")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype="<f4").reshape(shape)
        offset += nbytes
        return arr.copy()

    params = []
    for entry in manifest["params"]:
        params.append(Parameter(take(entry["shape"]), slot_axis=entry["slot_axis"],
                                name=entry["name"]))
    states = []
    for entry, p in zip(manifest["opt"], params):
        s = AdamState(p.shape, lr=entry["lr"], beta1=entry["beta1"],
                      beta2=entry["beta2"], eps=entry["eps"])
        s.t = entry["t"]
        s.m = take(p.shape)
        s.v = take(p.shape)
        states.append(s)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return manifest["meta"], params, states
