"""Self-describing artifact container: JSON header plus raw array blobs.

Layout of a container file:

    bytes 0..7    magic ``b"DLCONT01"``
    bytes 8..15   little-endian uint64, length of the UTF-8 header JSON
    header JSON   {"kind": str, "meta": {...}, "arrays": [{name, dtype,
                   shape, offset, nbytes}, ...]}
    blob          concatenated C-order little-endian array data; offsets in
                  the header are relative to the blob start

Model checkpoints, attack corpora and cached posterior matrices all share
this one format so every artifact can be inspected with the same tooling.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DatasetIOError

MAGIC = b"DLCONT01"


def save_container(path: str | Path, kind: str, meta: dict[str, Any],
                   arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` with a ``kind``/``meta`` header to ``path`` atomically."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries}).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_container(path: str | Path) -> tuple[str, dict[str, Any], dict[str, np.ndarray]]:
    """Read a container; returns ``(kind, meta, arrays)``.

    Raises :class:`DatasetIOError` naming the path when the file is missing
    or does not parse as a container.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"container file not found: {path}")
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != MAGIC:
                raise DatasetIOError(f"not a container file (bad magic): {path}")
            header_len = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(header_len).decode("utf-8"))
            blob = fh.read()
    except DatasetIOError:
        raise
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise DatasetIOError(f"corrupt container file: {path}: {exc}") from exc
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = blob[start:start + nbytes]
        if len(raw) != nbytes:
            raise DatasetIOError(f"truncated container file: {path}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["kind"], header["meta"], arrays
