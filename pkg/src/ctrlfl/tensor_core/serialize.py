"""Flat parameter container used for checkpoints and federation payloads.

Layout::

    b"CTFL" | u8 version | u32 header length (LE) | header JSON (UTF-8)
    | float64 LE values of every tensor, in header order

The header is ``{"meta": {...}, "tensors": [{"name", "shape", "partition"}, ...]}``
encoded with sorted keys and no whitespace so identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ProtocolError
from .params import ParamSet, Partition
from .tensor import Tensor

MAGIC = b"CTFL"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")


@dataclass
class Frame:
    meta: dict
    arrays: dict[str, np.ndarray]
    labels: dict[str, Partition]
    header_bytes: int = 0
    payload_bytes: int = 0
    total_bytes: int = field(default=0)

    @property
    def param_count(self) -> int:
        return sum(int(a.size) for a in self.arrays.values())

    def to_paramset(self, requires_grad: bool = False) -> ParamSet:
        ps = ParamSet()
        for name, arr in self.arrays.items():
            ps.add(name, Tensor(arr, requires_grad=requires_grad), self.labels[name])
        return ps


def _entries(params) -> list[tuple[str, np.ndarray, str]]:
    if isinstance(params, ParamSet):
        return [(n, t.data, params.label(n).value) for n, t in params.items()]
    return [(n, np.asarray(a), Partition(lab).value) for n, a, lab in params]


def serialize_params(params, meta: dict | None = None) -> bytes:
    """Encode a ParamSet (or ``(name, array, partition)`` triples) to bytes."""
    entries = _entries(params)
    header = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(a.shape), "partition": lab} for n, a, lab in entries],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a, _ in entries)
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + body


def header_size(blob: bytes) -> int:
    _, _, hlen = _PREFIX.unpack_from(blob, 0)
    return _PREFIX.size + hlen


def deserialize_params(blob: bytes) -> Frame:
    if len(blob) < _PREFIX.size:
        raise ProtocolError("truncated frame prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC or version != VERSION:
        raise ProtocolError(f"bad frame magic/version {magic!r}/{version}")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"unreadable frame header: {exc}") from exc
    offset = start + hlen
    arrays: dict[str, np.ndarray] = {}
    labels: dict[str, Partition] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(blob):
            raise ProtocolError(f"frame truncated inside tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        labels[entry["name"]] = Partition(entry["partition"])
        offset = end
    if offset != len(blob):
        raise ProtocolError(f"{len(blob) - offset} trailing bytes after last tensor")
    return Frame(header["meta"], arrays, labels, header_bytes=start + hlen,
                 payload_bytes=offset - start - hlen, total_bytes=len(blob))
