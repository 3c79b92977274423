"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
then every tensor's row-major little-endian float32 bytes back to back.
The header records the format version, the model config and its hash,
and for each tensor its name, shape, byte offset and byte length.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np
import torch

MAGIC = b"RXNLMCK\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(
    path: Union[str, Path],
    config: Mapping[str, Any],
    tensors: Mapping[str, torch.Tensor],
    extra: Mapping[str, Any] | None = None,
) -> str:
    """Write the container and return its SHA-256 digest."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": dict(config),
        "config_hash": config_hash(config),
        "dtype": "float32-le",
        "tensors": entries,
        "extra": dict(extra or {}),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    data = MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 12 + n
    tensors = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"] : base + e["offset"] + e["length"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header["config"], tensors, header.get("extra", {})


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
