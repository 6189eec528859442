"""Self-contained CDT1 writer and reader.

The format: 4 magic bytes b"CDT1", a uint32 little-endian header length,
a compact sorted-keys UTF-8 JSON header {"meta": {...}, "tensors": [...]},
then raw row-major float32 payloads concatenated in tensor-name order. The
tensor table is sorted by name and its offsets are absolute byte positions.
Output bytes are a pure function of the (meta, tensors) input, so repeated
exports of the same activations produce identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CDT1"

META_FIELDS = (
    "n_visual",
    "n_text",
    "n_sys",
    "grid_h",
    "grid_w",
    "d_llm",
    "d_enc",
    "d_key",
    "heads_llm",
    "heads_enc",
    "head_dim_llm",
)


class ContainerError(Exception):
    """Structurally broken container file."""


def write_container(path: str | Path, meta: Mapping[str, int], tensors: Mapping[str, np.ndarray]) -> Path:
    """Write tensors to a CDT1 file; returns the path written."""
    names = sorted(tensors)
    arrays = {n: np.ascontiguousarray(tensors[n], dtype="<f4") for n in names}
    payloads = [arrays[n].tobytes(order="C") for n in names]
    meta_obj = {k: int(meta[k]) for k in META_FIELDS}
    table = [
        {"name": n, "dims": [int(d) for d in arrays[n].shape], "offset": 0, "nbytes": len(p)}
        for n, p in zip(names, payloads)
    ]

    def encode() -> bytes:
        return json.dumps({"meta": meta_obj, "tensors": table}, sort_keys=True, separators=(",", ":")).encode("utf-8")

    # Offsets are written inside the header, and their digit count feeds
    # back into the header length; iterate until the length is stable.
    header = encode()
    while True:
        off = len(MAGIC) + 4 + len(header)
        for entry, p in zip(table, payloads):
            entry["offset"] = off
            off += len(p)
        new_header = encode()
        if len(new_header) == len(header):
            header = new_header
            break
        header = new_header

    out = Path(path)
    with open(out, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)
    return out


def _parse(blob: bytes) -> tuple[dict[str, int], list[dict]]:
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic: expected {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 8:
        raise ContainerError(f"truncated file: {len(blob)} bytes, header length field needs 8")
    (header_len,) = struct.unpack_from("<I", blob, 4)
    end = 8 + header_len
    if len(blob) < end:
        raise ContainerError(f"truncated header: need {end} bytes, file has {len(blob)}")
    try:
        header = json.loads(blob[8:end].decode("utf-8"))
        meta = {k: int(header["meta"][k]) for k in META_FIELDS}
        entries = list(header["tensors"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ContainerError(f"malformed header: {e!r}") from e
    return meta, entries


def read_header(path: str | Path) -> tuple[dict[str, int], list[dict]]:
    """Parse just the metadata and tensor table of a CDT1 file."""
    return _parse(Path(path).read_bytes())


def read_container(path: str | Path) -> tuple[dict[str, int], dict[str, np.ndarray]]:
    """Read a CDT1 file back into (meta, {name: float32 array})."""
    blob = Path(path).read_bytes()
    meta, entries = _parse(blob)
    tensors: dict[str, np.ndarray] = {}
    for e in entries:
        name = str(e["name"])
        dims = tuple(int(d) for d in e["dims"])
        off, nbytes = int(e["offset"]), int(e["nbytes"])
        if off < 0 or off + nbytes > len(blob) or nbytes % 4:
            raise ContainerError(f"tensor {name!r}: payload [{off}, {off + nbytes}) invalid for {len(blob)}-byte file")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off)
        if arr.size != int(np.prod(dims)):
            raise ContainerError(f"tensor {name!r}: {nbytes} payload bytes do not match dims {dims}")
        tensors[name] = arr.reshape(dims).copy()
    return meta, tensors
