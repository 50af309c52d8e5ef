"""Named-tensor container used for shards and weight files.

Layout::

    SIGMA-TENSORS/1\\n
    <one-line JSON header>\\n
    <little-endian float64 payload>

The header carries the record schema (attributes plus ``[name, shape]`` per
tensor, in payload order), the payload length and its SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import IntegrityError
from .numerics import DTYPE

MAGIC = b"SIGMA-TENSORS/1\n"
_LE_F64 = np.dtype("<f8")


@dataclass
class Record:
    attrs: dict[str, Any] = field(default_factory=dict)
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)


def encode(kind: str, records: list[Record], meta: dict[str, Any] | None = None) -> bytes:
    schema = []
    chunks = []
    for rec in records:
        entries = []
        for name, t in rec.tensors.items():
            arr = np.asarray(_to_numpy(t), dtype=_LE_F64)  # keeps 0-d shapes
            entries.append([name, list(arr.shape)])
            chunks.append(arr.tobytes(order="C"))
        schema.append({"attrs": rec.attrs, "tensors": entries})
    payload = b"".join(chunks)
    header = {
        "kind": kind,
        "meta": meta or {},
        "count": len(records),
        "records": schema,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return MAGIC + line + b"\n" + payload


def decode(data: bytes, source: str = "<bytes>") -> tuple[str, dict[str, Any], list[Record]]:
    if not data.startswith(MAGIC):
        raise IntegrityError(f"{source}: bad magic, not a tensor container")
    nl = data.find(b"\n", len(MAGIC))
    if nl < 0:
        raise IntegrityError(f"{source}: truncated header")
    try:
        header = json.loads(data[len(MAGIC):nl])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{source}: unreadable header ({exc})") from None
    payload = data[nl + 1:]
    if len(payload) != header.get("payload_bytes") or len(payload) % 8:
        raise IntegrityError(
            f"{source}: payload is {len(payload)} bytes, header declares {header.get('payload_bytes')}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{source}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype=_LE_F64)
    pos = 0
    records = []
    for rec in header["records"]:
        tensors = {}
        for name, shape in rec["tensors"]:
            n = int(np.prod(shape, dtype=np.int64))
            if pos + n > flat.size:
                raise IntegrityError(f"{source}: tensor {name!r} runs past the payload")
            tensors[name] = torch.from_numpy(flat[pos:pos + n].astype(np.float64).reshape(shape)).to(DTYPE)
            pos += n
        records.append(Record(rec["attrs"], tensors))
    if pos != flat.size:
        raise IntegrityError(f"{source}: {flat.size - pos} unclaimed payload values")
    if header.get("count") != len(records):
        raise IntegrityError(f"{source}: record count disagrees with header")
    return header["kind"], header["meta"], records


def write_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read(path: str | Path) -> tuple[str, dict[str, Any], list[Record]]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any] | None = None) -> None:
    write_atomic(path, encode("weights", [Record({}, dict(tensors))], meta))


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    kind, meta, records = read(path)
    if kind != "weights" or len(records) != 1:
        raise IntegrityError(f"{path}: expected a single-record weights container, got kind={kind!r}")
    return records[0].tensors, meta


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().to(torch.float64).cpu().numpy()
    return np.asarray(t, dtype=np.float64)
