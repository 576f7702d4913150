"""Versioned, byte-deterministic checkpoint container.

Layout::

    TILAB-CHECKPOINT 1\n
    <one line of JSON: arch, seed, meta, tensor table, sha256 of payload>\n
    <payload: little-endian float64 tensors, concatenated in table order>

The JSON is written with sorted keys so identical state gives identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, ArchConfig, ModelParams

MAGIC = b"TILAB-CHECKPOINT 1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, arch: ArchConfig, seed: int | None = None,
                    meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> str:
    """Write a checkpoint; returns the payload sha256."""
    tensors = [(f"params/{n}", np.asarray(a, dtype="<f8")) for n, a in zip(PARAM_NAMES, params.arrays())]
    for name in sorted(extra or {}):
        tensors.append((name, np.asarray(extra[name], dtype="<f8")))
    payload = b"".join(np.ascontiguousarray(a).tobytes() for _, a in tensors)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "arch": arch.to_dict(),
        "seed": seed,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "sha256": digest,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    return digest


def load_checkpoint(path) -> dict:
    """Read a checkpoint, verifying magic and payload hash.

    Returns a dict with ``params``, ``arch``, ``seed``, ``meta`` and ``extra``.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a tilab checkpoint")
    end = raw.index(b"\n", len(MAGIC))
    try:
        header = json.loads(raw[len(MAGIC) : end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = raw[end + 1 :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    arrays, off = {}, 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(t["shape"]).copy()
        off += 8 * n
    params = ModelParams(*(arrays.pop(f"params/{n}") for n in PARAM_NAMES))
    return {
        "params": params,
        "arch": ArchConfig(**header["arch"]),
        "seed": header["seed"],
        "meta": header["meta"],
        "extra": arrays,
    }
