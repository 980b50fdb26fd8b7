"""Versioned binary container for named arrays plus a JSON header.

Layout (all integers little-endian)::

    magic    8 bytes   b"DSOFA\\x00\\x01\\n"
    hlen     8 bytes   uint64, length of the JSON header in bytes
    header   hlen      UTF-8 JSON, keys sorted, no whitespace
    payload            arrays back to back, C order, in header order

The header holds ``kind``, ``version``, caller metadata under ``meta`` and one
``arrays`` entry per array: ``name``, ``dtype`` (numpy ``str``, e.g.
``"<f8"``), ``shape``, ``offset`` and ``nbytes`` relative to the payload
start. Output bytes depend only on the inputs, so identical runs write
identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSOFA\x00\x01\n"


class ContainerError(ValueError):
    pass


def write_container(path, kind: str, version: int, meta: dict, arrays: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
            a = a.astype(a.dtype.newbyteorder("<"))
        if a.dtype.kind not in "biuf":
            raise ContainerError(f"array {name!r}: unsupported dtype {a.dtype}")
        dtype = a.dtype.str if a.dtype.kind != "b" else "|b1"
        raw = a.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {"kind": kind, "version": version, "meta": meta, "arrays": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_container(path, kind: str | None = None, max_version: int | None = None):
    """Return ``(version, meta, arrays)``; checks kind and version when given."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a deepsofa container")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: expected {kind!r}, found {header['kind']!r}")
    if max_version is not None and header["version"] > max_version:
        raise ContainerError(f"{path}: version {header['version']} is newer than supported {max_version}")
    arrays = {}
    for e in header["arrays"]:
        start = pos + e["offset"]
        buf = data[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ContainerError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["version"], header["meta"], arrays
