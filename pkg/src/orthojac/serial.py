"""Flat binary container for named float64 arrays.

Layout: a 4-byte little-endian header length, a compact JSON header
listing array names and shapes (sorted by name), then each array's
C-order float64 little-endian payload in header order.  Writing the
same mapping twice produces byte-identical files.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DataFormatError

FORMAT_NAME = "orthojac-arrays"
FORMAT_VERSION = 1


def dump_arrays(arrays: dict, meta: dict | None = None) -> bytes:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        entries.append({"name": name, "shape": list(arr.shape)})
        payload += arr.astype("<f8").tobytes()
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "arrays": entries}
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return len(blob).to_bytes(4, "little") + blob + bytes(payload)


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_arrays(arrays, meta))


def parse_arrays(raw: bytes):
    """Decode a container; returns (arrays, meta)."""
    if len(raw) < 4:
        raise DataFormatError(f"missing header length at byte offset 0 (file has {len(raw)} bytes)")
    header_len = int.from_bytes(raw[:4], "little")
    if len(raw) < 4 + header_len:
        raise DataFormatError(f"truncated header at byte offset 4 (expected {header_len} bytes)")
    try:
        header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"bad JSON header at byte offset 4: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise DataFormatError(f"unknown container format {header.get('format')!r} at byte offset 4")
    arrays = {}
    offset = 4 + header_len
    for entry in header.get("arrays", ()):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataFormatError(
                f"truncated payload for array {entry['name']!r} at byte offset {offset}"
                f" (expected {nbytes} bytes, found {len(chunk)})"
            )
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(
            np.float64
        ).reshape(shape)
        offset += nbytes
    return arrays, header.get("meta", {})


def load_arrays(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_arrays(raw)
