"""Checkpoint container: named (shape, values) triples in JSON with a schema tag."""

from __future__ import annotations

import hashlib
import json

import numpy as np

SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_params(path, named_params, meta=None):
    payload = {
        "schema_version": SCHEMA_VERSION,
        "meta": meta or {},
        "params": [
            {"name": name, "shape": list(p.data.shape), "values": p.data.ravel().tolist()}
            for name, p in named_params
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_params(path):
    """Returns (state dict name -> ndarray, meta dict)."""
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {version!r} in {path}")
    state = {}
    for rec in payload["params"]:
        arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        state[rec["name"]] = arr
    return state, payload.get("meta", {})


def param_hash(named_params):
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
