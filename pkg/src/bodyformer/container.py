"""Flat tensor container: the on-disk format for body models and checkpoints.

Layout, all little-endian:

    bytes 0..15   magic ``TNSRBOX1`` + 7 zero bytes + format version (1 byte)
    u32           field count
    per field     u16 name length, name (utf-8), u8 dtype code
                  (0 = float64, 1 = int32), u8 ndim, u32 * ndim dims,
                  u64 payload offset, u64 payload byte length
    u64           payload region size
    payload       raw array bytes, C order, at the recorded offsets

A JSON sidecar variant (same fields, base64 payloads) is accepted by the
reader for debugging; files starting with ``{`` are parsed as JSON.
"""

from __future__ import annotations

import base64
import json
import struct
from typing import Mapping

import numpy as np

MAGIC = b"TNSRBOX1\x00\x00\x00\x00\x00\x00\x00\x01"

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<i4"): 1}
_DTYPE_NAMES = {0: "float64", 1: "int32"}
_NAME_CODES = {"float64": 0, "int32": 1}


class ContainerParseError(ValueError):
    """Malformed container file; carries the failing byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def _coerce(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype.kind in "iu" and a.dtype != np.dtype("<i4"):
        a = a.astype("<i4")
    elif a.dtype.kind == "f" and a.dtype != np.dtype("<f8"):
        a = a.astype("<f8")
    if a.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {a.dtype}; use float64 or int32")
    # ascontiguousarray promotes 0-d to 1-d; restore the original shape.
    return np.ascontiguousarray(a).reshape(a.shape)


def write(path, fields: Mapping[str, np.ndarray]) -> None:
    """Write named arrays to ``path`` in the binary container layout."""
    header = bytearray(MAGIC)
    header += struct.pack("<I", len(fields))
    payload = bytearray()
    for name, raw in fields.items():
        arr = _coerce(raw)
        encoded = name.encode("utf-8")
        offset = len(payload)
        payload += arr.tobytes(order="C")
        header += struct.pack("<H", len(encoded))
        header += encoded
        header += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
        header += struct.pack("<QQ", offset, arr.nbytes)
    header += struct.pack("<Q", len(payload))
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(bytes(payload))


def write_json(path, fields: Mapping[str, np.ndarray]) -> None:
    """Write the JSON sidecar variant with base64 payloads."""
    doc = {"format": "tnsrbox-json", "version": 1, "fields": []}
    for name, raw in fields.items():
        arr = _coerce(raw)
        doc["fields"].append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[_DTYPE_CODES[arr.dtype]],
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii"),
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise ContainerParseError("truncated header", self.pos)
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ContainerParseError("truncated header", self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def _read_json(blob: bytes, path) -> dict[str, np.ndarray]:
    try:
        doc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerParseError(f"invalid JSON container {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "tnsrbox-json":
        raise ContainerParseError(f"not a tnsrbox JSON container: {path}")
    fields: dict[str, np.ndarray] = {}
    for entry in doc.get("fields", []):
        try:
            name = entry["name"]
            dtype = _DTYPES[_NAME_CODES[entry["dtype"]]]
            shape = tuple(int(v) for v in entry["shape"])
            raw = base64.b64decode(entry["data"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ContainerParseError(f"bad JSON field entry: {exc}") from exc
        want = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) != want:
            raise ContainerParseError(
                f"field '{name}' payload is {len(raw)} bytes, expected {want}"
            )
        fields[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return fields


def read(path) -> dict[str, np.ndarray]:
    """Read a container (binary or JSON sidecar) into name -> array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:1] == b"{":
        return _read_json(blob, path)
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise ContainerParseError(f"bad magic in {path}", 0)
    cur = _Cursor(blob)
    cur.pos = len(MAGIC)
    (n_fields,) = cur.take("<I")
    specs = []
    for _ in range(n_fields):
        (name_len,) = cur.take("<H")
        name = cur.take_bytes(name_len).decode("utf-8")
        code, ndim = cur.take("<BB")
        if code not in _DTYPES:
            raise ContainerParseError(f"unknown dtype code {code}", cur.pos)
        shape = cur.take(f"<{ndim}I") if ndim else ()
        offset, nbytes = cur.take("<QQ")
        specs.append((name, code, shape, offset, nbytes))
    (payload_size,) = cur.take("<Q")
    payload = blob[cur.pos :]
    if len(payload) != payload_size:
        raise ContainerParseError(
            f"payload is {len(payload)} bytes, header says {payload_size}", cur.pos
        )
    fields: dict[str, np.ndarray] = {}
    for name, code, shape, offset, nbytes in specs:
        dtype = _DTYPES[code]
        want = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if want != nbytes:
            raise ContainerParseError(
                f"field '{name}' length {nbytes} does not match shape {shape}"
            )
        if offset + nbytes > len(payload):
            raise ContainerParseError(
                f"field '{name}' overruns payload", cur.pos + offset
            )
        arr = np.frombuffer(payload, dtype=dtype, count=want // dtype.itemsize,
                            offset=offset)
        fields[name] = arr.reshape(shape).copy()
    return fields
