"""JSON checkpoint format shared by backbones and tuned prompts.

Layout::

    {
      "format": "mudpt.checkpoint",
      "version": 1,
      "kind": "backbone" | "prompts",
      "meta": {...},                      # free-form, JSON-serializable
      "content_hash": "<sha256 hex>",
      "params": {"<path>": {"shape": [...], "values": [...row-major floats...]}}
    }

Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact for float64.  ``content_hash`` covers parameter names, shapes and
little-endian float64 bytes, and is verified on load.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

FORMAT = "mudpt.checkpoint"
VERSION = 1


def content_hash(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(tuple(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save(path, kind: str, params: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    for name, arr in arrays.items():
        if not np.isfinite(arr).all():
            raise CheckpointError(f"parameter {name} contains non-finite values")
    digest = content_hash(arrays)
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "meta": meta or {},
        "content_hash": digest,
        "params": {k: {"shape": list(a.shape), "values": a.reshape(-1).tolist()}
                   for k, a in sorted(arrays.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, allow_nan=False))
    return digest


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict, str]:
    """Return ``(params, meta, content_hash)``; raises CheckpointError on any mismatch."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} document")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {doc.get('kind')!r}")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    digest = content_hash(params)
    if digest != doc.get("content_hash"):
        raise CheckpointError(f"content hash mismatch in {path}")
    return params, doc.get("meta", {}), digest
