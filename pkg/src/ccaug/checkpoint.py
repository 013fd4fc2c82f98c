"""Named-tensor checkpoint container.

Layout::

    b"NTC1"                      magic
    uint64 little-endian         header length H
    H bytes UTF-8 JSON           {"meta": {...}, "tensors": [{name, shape, dtype, offset, nbytes}, ...]}
    payload                      raw little-endian float32 values, tensors back to back

Offsets are relative to the start of the payload. The JSON header is written
with sorted keys so identical tensors and metadata give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"NTC1"


def to_bytes(tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4")
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    if len({e["name"] for e in entries}) != len(entries):
        raise ValueError("duplicate tensor names")
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def save(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(tensors, meta))
    return path


def _split(data: bytes) -> tuple[dict, bytes]:
    if data[:4] != MAGIC:
        raise ValueError("not a named-tensor checkpoint")
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    return header, data[12 + hlen :]


def read_manifest(path: str | Path) -> dict:
    header, _ = _split(Path(path).read_bytes())
    return header


def from_bytes(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    header, payload = _split(data)
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] != "float32":
            raise ValueError(f"unsupported dtype {e['dtype']}")
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, header["meta"]


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    return from_bytes(Path(path).read_bytes())
