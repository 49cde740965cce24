"""Versioned on-disk containers.

Two formats live here:

* tensor checkpoints: a magic line, one JSON header line, then the raw
  little-endian bytes of every array in header order. Header keys are sorted
  and no timestamps are written, so save -> load -> save is byte-identical.
* record files: JSON lines. The first line carries ``format_version`` and
  ``kind``; every following line is one record with explicit field names.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"DYNPERTURB-CKPT\n"


class FormatError(ValueError):
    pass


def save_arrays(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": entries,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(line)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint container")
    nl = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):nl])
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')}")
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    body = data[nl + 1:]
    arrays = {}
    for e in header["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def write_records(path, kind: str, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION, "kind": kind}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path, kind: str | None = None) -> list[dict[str, Any]]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty record file")
    head = json.loads(lines[0])
    if head.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {head.get('format_version')}")
    if kind is not None and head.get("kind") != kind:
        raise FormatError(f"{path}: expected {kind!r} records, found {head.get('kind')!r}")
    return [json.loads(ln) for ln in lines[1:]]
