"""Checkpoint file format.

A checkpoint is one file: a single line of JSON (the manifest) terminated by
``\\n``, followed by the raw little-endian float64 payload.  The manifest
lists every array with its name, shape and byte offset into the payload,
plus the architecture config and free-form metadata.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .engine import ShapeError
from .model import ArchConfig, ModelParams, build_model
from .normalization import DsbnState

MAGIC = "msnet-checkpoint/1"


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


def _group_arrays(prefix: str, group) -> list[tuple[str, np.ndarray]]:
    out = [(f"{prefix}/{name}", t.data) for name, t in group.tensors.items()]
    for name, state in group.norms.items():
        sites = state.per_site.items() if isinstance(state, DsbnState) else [(None, state)]
        for s, bn in sites:
            key = f"{prefix}/{name}" if s is None else f"{prefix}/{name}@{s}"
            out += [(f"{key}:gamma", bn.gamma.data), (f"{key}:beta", bn.beta.data),
                    (f"{key}:running_mean", bn.running_mean), (f"{key}:running_var", bn.running_var)]
    return out


def model_arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    arrays = _group_arrays("encoder", params.encoder) + _group_arrays("decoder", params.decoder)
    for s, g in enumerate(params.aux or [], start=1):
        arrays += _group_arrays(f"aux{s}", g)
    return arrays


def _norm_updates(params: ModelParams) -> dict[str, int]:
    out = {}
    groups = [("encoder", params.encoder), ("decoder", params.decoder)]
    groups += [(f"aux{s}", g) for s, g in enumerate(params.aux or [], start=1)]
    for prefix, g in groups:
        for name, bn in g.bn_states():
            out[f"{prefix}/{name}"] = bn.updates
    return out


def save_checkpoint(params: ModelParams, path, extra_arrays: dict | None = None, metadata: dict | None = None) -> Path:
    """Write ``params`` (and optional extra arrays such as optimizer moments).

    The file is written to a temporary name and renamed, so an interrupted
    write never leaves a truncated checkpoint behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = model_arrays(params) + sorted((extra_arrays or {}).items())
    entries, offset = [], 0
    for name, arr in arrays:
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    manifest = {
        "format": MAGIC,
        "config": asdict(params.config),
        "has_aux": params.aux is not None,
        "norm_updates": _norm_updates(params),
        "metadata": metadata or {},
        "arrays": entries,
        "payload_bytes": offset,
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (manifest, name -> array) without building a model."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:newline])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (format {manifest.get('format')!r})")
    payload = raw[newline + 1:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    arrays = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    return manifest, arrays


def _fill(params: ModelParams, arrays: dict[str, np.ndarray], updates: dict[str, int]) -> None:
    def put(name, target_shape):
        if name not in arrays:
            raise ShapeError(f"architecture mismatch: checkpoint lacks array {name!r}")
        arr = arrays[name]
        if arr.shape != tuple(target_shape):
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {tuple(target_shape)}")
        return arr.copy()

    groups = [("encoder", params.encoder), ("decoder", params.decoder)]
    groups += [(f"aux{s}", g) for s, g in enumerate(params.aux or [], start=1)]
    for prefix, g in groups:
        for name, t in g.tensors.items():
            t.data = put(f"{prefix}/{name}", t.shape)
        for name, bn in g.bn_states():
            key = f"{prefix}/{name}"
            bn.gamma.data = put(f"{key}:gamma", bn.gamma.shape)
            bn.beta.data = put(f"{key}:beta", bn.beta.shape)
            bn.running_mean = put(f"{key}:running_mean", bn.running_mean.shape)
            bn.running_var = put(f"{key}:running_var", bn.running_var.shape)
            bn.updates = int(updates.get(key, 0))


def load_checkpoint(path, config: ArchConfig | None = None) -> ModelParams:
    """Rebuild a model from ``path``.

    With ``config`` given, the checkpoint is loaded into that architecture and
    any shape disagreement raises :class:`ShapeError`.
    """
    manifest, arrays = read_checkpoint(path)
    stored = ArchConfig(**manifest["config"])
    params = build_model(config or stored, seed=0, with_aux=manifest["has_aux"])
    _fill(params, arrays, manifest.get("norm_updates", {}))
    return params


def checkpoint_extras(path, prefix: str) -> dict[str, np.ndarray]:
    _, arrays = read_checkpoint(path)
    return {k: v for k, v in arrays.items() if k.startswith(prefix)}
