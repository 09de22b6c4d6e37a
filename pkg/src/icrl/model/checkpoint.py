"""Versioned binary checkpoint: named float32 little-endian arrays plus a JSON header.

Layout::

    b"ICRLCKPT" | u32 version | u32 header_len | header (UTF-8 JSON) | array data

The header holds the serialized ``ModelConfig``, free-form metadata and, per
array, its name, shape and byte offset into the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .policy import ICLPolicy

MAGIC = b"ICRLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _as_le_f4(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4")


def save_checkpoint(
    path: str | Path,
    model: ICLPolicy,
    extra: dict[str, torch.Tensor] | None = None,
    meta: dict | None = None,
) -> Path:
    """Write ``model`` parameters and any ``extra`` arrays (e.g. optimizer moments)."""
    arrays = {f"param/{n}": p for n, p in model.named_parameters()}
    for n, t in (extra or {}).items():
        arrays[f"extra/{n}"] = t
    entries, blobs, offset = [], [], 0
    for name, t in arrays.items():
        buf = _as_le_f4(t).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"model_config": model.cfg.to_dict(), "meta": meta or {}, "arrays": entries}, sort_keys=True
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` without building a model."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    data = memoryview(raw)[start + hlen :]
    arrays = {}
    for e in header["arrays"]:
        if e["offset"] + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        buf = data[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[ICLPolicy, dict[str, torch.Tensor], dict]:
    """Return ``(model, extra_arrays, meta)``."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = ICLPolicy(cfg)
    params = dict(model.named_parameters())
    missing = set(params) - {k[len("param/") :] for k in arrays if k.startswith("param/")}
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            a = arrays[f"param/{name}"]
            if tuple(a.shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: shape mismatch for {name}: {a.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(a))
    extra = {k[len("extra/") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("extra/")}
    return model, extra, header.get("meta", {})
