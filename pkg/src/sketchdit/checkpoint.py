"""Versioned single-file checkpoint container.

Layout: an 8-byte magic, a little-endian uint32 format version, a uint64
header length, a compact JSON header, then the parameter payload as raw
little-endian float32 blobs concatenated in sorted-name order. The header
carries the model configs, the noise-schedule config, a free-form meta dict,
the per-parameter name/shape/offset table, and a SHA-256 of the payload, so a
corrupted file fails loudly instead of loading garbage. Saving what was just
loaded reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"SKDITCKP"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str  # backbone | generation | edit
    configs: dict
    schedule: dict
    params: dict[str, np.ndarray]  # name -> float32 array
    meta: dict = field(default_factory=dict)


def flat_state(**modules: nn.Module) -> dict[str, torch.Tensor]:
    """Merge module state dicts under 'prefix.param.name' keys."""
    out = {}
    for prefix, mod in modules.items():
        for k, v in mod.state_dict().items():
            out[f"{prefix}.{k}"] = v
    return out


def _to_f4(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(np.asarray(value), dtype="<f4")


def save_checkpoint(
    path: str | Path,
    *,
    kind: str,
    configs: dict,
    schedule: dict,
    params: dict,
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    arrays = {name: _to_f4(v) for name, v in params.items()}
    table = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        a = arrays[name]
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "numel": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size * 4
    payload = b"".join(chunks)
    header = {
        "version": VERSION,
        "kind": kind,
        "configs": configs,
        "schedule": schedule,
        "meta": meta or {},
        "params": table,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC) + 4)
    start = len(MAGIC) + 12
    try:
        header = json.loads(blob[start : start + header_len])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: corrupt header: {e}") from None
    payload = blob[start + header_len :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch, file is corrupt")
    params = {}
    for entry in header["params"]:
        a = np.frombuffer(
            payload, dtype="<f4", count=entry["numel"], offset=entry["offset"]
        ).reshape(entry["shape"])
        params[entry["name"]] = a
    return Checkpoint(
        kind=header["kind"],
        configs=header["configs"],
        schedule=header["schedule"],
        params=params,
        meta=header.get("meta", {}),
    )


def check_config(ckpt: Checkpoint, name: str, expected: dict) -> None:
    """Fail if the stored config disagrees with the one the caller rebuilt."""
    stored = ckpt.configs.get(name)
    stored = {k: tuple(v) if isinstance(v, list) else v for k, v in (stored or {}).items()}
    if stored != expected:
        raise ValueError(f"checkpoint config {name!r} mismatch:\n  stored {stored}\n  expected {expected}")


def load_into(module: nn.Module, ckpt: Checkpoint, prefix: str) -> None:
    """Strict load of every module parameter from 'prefix.name' entries."""
    state = {}
    for k in module.state_dict():
        full = f"{prefix}.{k}"
        if full not in ckpt.params:
            raise KeyError(f"checkpoint has no parameter {full}")
        state[k] = torch.from_numpy(ckpt.params[full].copy())
    module.load_state_dict(state)


def load_partial(module: nn.Module, ckpt: Checkpoint, prefix: str) -> tuple[list[str], list[str]]:
    """Load by name where shapes agree; returns (loaded, skipped) names.

    This is how the editing network takes over a generation branch: shared
    sketch-pathway parameters match by name, while shapes that changed (the
    widened fusion input) are left at their fresh initialization.
    """
    loaded, skipped = [], []
    current = module.state_dict()
    state = {}
    for k, v in current.items():
        full = f"{prefix}.{k}"
        stored = ckpt.params.get(full)
        if stored is not None and tuple(stored.shape) == tuple(v.shape):
            state[k] = torch.from_numpy(stored.copy())
            loaded.append(k)
        else:
            state[k] = v
            skipped.append(k)
    module.load_state_dict(state)
    return loaded, skipped


def module_sha256(module: nn.Module) -> str:
    """Canonical parameter hash (sorted names, float32 bytes); the frozen-
    backbone training invariant compares this before and after a stage."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(_to_f4(state[name]).tobytes())
    return h.hexdigest()
