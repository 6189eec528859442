"""Reading, writing, and validating CDT1 tensor dump files.

A CDT1 file is a self-describing container for the per-sample tensors the
compression pipeline consumes:

    offset 0   magic bytes b"CDT1"
    offset 4   uint32 little-endian byte length of the JSON header
    offset 8   UTF-8 JSON header: {"meta": {...}, "tensors": [...]}
    then       raw tensor payloads, concatenated in tensor-name order

The header's tensor table is sorted by name and each entry records the
tensor's name, dims, absolute byte offset, and byte length. Payloads are
row-major little-endian IEEE-754 float32; no other dtype is accepted, so
readers never branch on dtype. Writing the same dump twice produces
byte-identical files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CDT1"

# Canonical tensor names. scap_q/scap_k carry the raw query/key blocks for
# the first-decoder-layer cross-attention probe; scap_attn_block is the
# precomputed text-to-vision attention block and takes precedence when both
# forms are present.
ENC_ATTN = "enc_attn_penult"
ENC_FEAT = "enc_feat_penult"
ENC_KEYS = "enc_keys_penult"
PROJ_TOKENS = "proj_tokens"
SCAP_Q = "scap_q"
SCAP_K = "scap_k"
SCAP_ATTN_BLOCK = "scap_attn_block"

ROW_STOCHASTIC_TOL = 1e-4


class DumpError(Exception):
    """Base class for dump read/write failures."""


class DumpFormatError(DumpError):
    """Structurally broken file: bad magic, truncation, undecodable header."""


class DumpValidationError(DumpError):
    """Dump content violates an invariant. Carries the violation report."""

    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        lines = "; ".join(v.message for v in violations[:5])
        more = "" if len(violations) <= 5 else f" (+{len(violations) - 5} more)"
        super().__init__(f"invalid dump: {lines}{more}")


@dataclass(frozen=True)
class Violation:
    """One invariant failure, serializable as a JSON object."""

    code: str
    message: str
    tensor: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SampleMeta:
    """Per-sample geometry: token counts and model dimensions."""

    n_visual: int
    n_text: int
    n_sys: int
    grid_h: int
    grid_w: int
    d_llm: int
    d_enc: int
    d_key: int
    heads_llm: int
    heads_enc: int
    head_dim_llm: int

    @property
    def seq_len(self) -> int:
        """Decoder sequence length: system + visual + text tokens."""
        return self.n_sys + self.n_visual + self.n_text


@dataclass
class Tensor:
    """Named f32 tensor. Construction coerces; validation happens later.

    Data is always stored as a contiguous float32 array reshaped to dims
    when the element counts agree; mismatched dims are kept as declared so
    validate_dump can report them instead of erroring at construction.
    """

    name: str
    dims: tuple[int, ...]
    data: np.ndarray

    def __init__(self, name: str, dims, data):
        self.name = name
        self.dims = tuple(int(d) for d in dims)
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        n = int(np.prod(self.dims)) if self.dims else 0
        if arr.size == n and all(d > 0 for d in self.dims):
            arr = arr.reshape(self.dims)
        self.data = arr

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.dims == other.dims
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class TensorDump:
    """A sample's metadata plus its tensor table keyed by canonical name."""

    meta: SampleMeta
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorDump):
            return NotImplemented
        return self.meta == other.meta and self.tensors == other.tensors


def _expected_dims(meta: SampleMeta) -> dict[str, tuple[int, ...]]:
    n, s = meta.n_visual, meta.seq_len
    return {
        ENC_ATTN: (meta.heads_enc, 1 + n, 1 + n),
        ENC_FEAT: (n, meta.d_enc),
        ENC_KEYS: (meta.heads_enc, n, meta.d_key),
        PROJ_TOKENS: (n, meta.d_llm),
        SCAP_Q: (meta.heads_llm, s, meta.head_dim_llm),
        SCAP_K: (meta.heads_llm, s, meta.head_dim_llm),
        SCAP_ATTN_BLOCK: (meta.n_text, n),
    }


def validate_dump(dump: TensorDump) -> list[Violation]:
    """Check every dump invariant; return violations as data, not errors.

    The report is empty iff the dump is valid. Unknown tensor names are
    permitted (only shape-product and finiteness apply to them); canonical
    names are additionally checked against the meta-implied dims, and
    enc_attn_penult rows must be row-stochastic within 1e-4.
    """
    out: list[Violation] = []
    meta = dump.meta

    for name, value in asdict(meta).items():
        if not isinstance(value, int) or value <= 0:
            out.append(Violation("meta_nonpositive", f"meta.{name} must be a positive integer, got {value!r}"))
    if meta.grid_h * meta.grid_w != meta.n_visual:
        out.append(
            Violation(
                "grid_mismatch",
                f"grid mismatch: grid_h*grid_w = {meta.grid_h * meta.grid_w} != n_visual = {meta.n_visual}",
            )
        )
    if meta.heads_llm * meta.head_dim_llm != meta.d_llm:
        out.append(
            Violation(
                "head_dim_mismatch",
                f"heads_llm*head_dim_llm = {meta.heads_llm * meta.head_dim_llm} != d_llm = {meta.d_llm}",
            )
        )

    expected = _expected_dims(meta)
    for name, t in dump.tensors.items():
        if t.name != name:
            out.append(Violation("name_mismatch", f"table key {name!r} != tensor name {t.name!r}", name))
        if not t.dims or any(d <= 0 for d in t.dims):
            out.append(Violation("bad_dims", f"{name}: dims must be positive integers, got {t.dims}", name))
            continue
        if int(np.prod(t.dims)) != t.data.size:
            out.append(
                Violation(
                    "dim_mismatch",
                    f"{name}: dims {t.dims} imply {int(np.prod(t.dims))} elements, payload has {t.data.size}",
                    name,
                )
            )
            continue
        if not np.all(np.isfinite(t.data)):
            bad = int(np.flatnonzero(~np.isfinite(t.data.ravel()))[0])
            out.append(Violation("non_finite", f"{name}: non-finite value at flat index {bad}", name))
        if name in expected and t.dims != expected[name]:
            out.append(
                Violation(
                    "dim_mismatch",
                    f"{name}: dims {t.dims} do not match meta-implied {expected[name]}",
                    name,
                )
            )

    has_qk = SCAP_Q in dump.tensors and SCAP_K in dump.tensors
    if not has_qk and SCAP_ATTN_BLOCK not in dump.tensors:
        out.append(
            Violation(
                "missing_scap",
                "cross-attention inputs required: provide scap_q+scap_k or scap_attn_block",
            )
        )

    attn = dump.tensors.get(ENC_ATTN)
    if attn is not None and attn.dims == expected.get(ENC_ATTN) and np.all(np.isfinite(attn.data)):
        if np.any(attn.data < 0):
            out.append(Violation("negative_value", f"{ENC_ATTN}: attention entries must be >= 0", ENC_ATTN))
        sums = attn.data.astype(np.float64).sum(axis=-1)
        bad = np.argwhere(np.abs(sums - 1.0) > ROW_STOCHASTIC_TOL)
        for h, r in bad[:8]:
            out.append(
                Violation(
                    "row_sum",
                    f"{ENC_ATTN}: head {h} row {r} sums to {sums[h, r]:.6g}, expected 1 within {ROW_STOCHASTIC_TOL}",
                    ENC_ATTN,
                )
            )
    block = dump.tensors.get(SCAP_ATTN_BLOCK)
    if block is not None and np.all(np.isfinite(block.data)) and np.any(block.data < 0):
        out.append(Violation("negative_value", f"{SCAP_ATTN_BLOCK}: entries must be >= 0", SCAP_ATTN_BLOCK))

    return out


_META_FIELDS = (
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


def write_container(path: str | Path, meta: SampleMeta, tensors: Mapping[str, Tensor]) -> None:
    """Write a CDT1 container without dump-level validation.

    Used both for full tensor dumps and for compressed-output files that
    carry only a `compressed_tokens` tensor. Output bytes are a pure
    function of (meta, tensors).
    """
    names = sorted(tensors)
    payloads = []
    for name in names:
        t = tensors[name]
        payloads.append(np.asarray(t.data, dtype="<f4").tobytes(order="C"))

    # Two passes: header length shifts payload offsets, and the offsets are
    # written inside the header. Fixed-width offset fields would also work
    # but JSON keeps the header human-readable.
    table = [
        {"name": name, "dims": list(tensors[name].dims), "offset": 0, "nbytes": len(p)}
        for name, p in zip(names, payloads)
    ]
    meta_obj = {k: getattr(meta, k) for k in _META_FIELDS}

    def encode(entries):
        return json.dumps({"meta": meta_obj, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode(
            "utf-8"
        )

    header = encode(table)
    base = len(MAGIC) + 4 + len(header)
    while True:
        off = base
        for entry in table:
            entry["offset"] = off
            off += entry["nbytes"]
        new_header = encode(table)
        if len(new_header) == len(header):
            header = new_header
            break
        header = new_header
        base = len(MAGIC) + 4 + len(header)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)


def read_container(path: str | Path) -> tuple[SampleMeta, dict[str, Tensor]]:
    """Read a CDT1 container. Raises DumpFormatError on structural damage."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DumpFormatError(f"bad magic at byte offset 0: expected {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 8:
        raise DumpFormatError(f"truncated file: {len(blob)} bytes, header length field needs 8")
    (header_len,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + header_len
    if len(blob) < header_end:
        raise DumpFormatError(f"truncated header: need {header_end} bytes, file has {len(blob)}")
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DumpFormatError(f"undecodable header at byte offset 8: {e}") from e

    try:
        meta = SampleMeta(**{k: int(header["meta"][k]) for k in _META_FIELDS})
        entries = header["tensors"]
    except (KeyError, TypeError, ValueError) as e:
        raise DumpFormatError(f"malformed header: {e!r}") from e

    tensors: dict[str, Tensor] = {}
    for entry in entries:
        name, dims = entry["name"], tuple(int(d) for d in entry["dims"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if off < header_end or off + nbytes > len(blob):
            raise DumpFormatError(
                f"tensor {name!r}: payload [{off}, {off + nbytes}) outside file of {len(blob)} bytes"
            )
        count = nbytes // 4
        if nbytes % 4 != 0 or (dims and count != math.prod(dims)):
            raise DumpFormatError(
                f"tensor {name!r} at byte offset {off}: {nbytes} payload bytes do not match dims {dims}"
            )
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        tensors[name] = Tensor(name, dims, data.copy())
    return meta, tensors


def write_dump(dump: TensorDump, path: str | Path) -> None:
    """Validate and write a full tensor dump. Invalid dumps raise."""
    violations = validate_dump(dump)
    if violations:
        raise DumpValidationError(violations)
    write_container(path, dump.meta, dump.tensors)


def read_dump(path: str | Path) -> TensorDump:
    """Read and validate a full tensor dump.

    Structural damage (magic, truncation, payload/dims disagreement) raises
    DumpFormatError with tensor name and byte offset; invariant failures
    (grid mismatch, non-finite values, row sums) raise DumpValidationError.
    """
    meta, tensors = read_container(path)
    dump = TensorDump(meta=meta, tensors=tensors)
    violations = validate_dump(dump)
    if violations:
        raise DumpValidationError(violations)
    return dump
