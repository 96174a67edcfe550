"""Single-file checkpoint container.

Layout::

    b"CAL3" | u32 format version | u64 header length | UTF-8 JSON header | f32 payloads

The header carries free-form metadata plus a tensor directory
(``name``/``shape``/``offset``); payloads are little-endian float32 arrays
concatenated in directory order. Headers are serialised with sorted keys so a
load/save round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"CAL3"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    header: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory, payload, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        payload.append(buf)
        offset += len(buf)
    header = dict(ckpt.header)
    header["tensors"] = directory
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(hbytes)), hbytes, *payload])


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise LoadError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported checkpoint format version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(header, tensors)


def write_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def read_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
