"""Fixed-width packed storage for quantized weights.

Codes index a per-format level table (code -> normalized level). Within a
row, b-bit codes form a little-endian bit stream: code j occupies bits
[j*b, (j+1)*b). ``PackTrit243`` instead stores 5 ternary digits per byte as
the base-3 numeral t0 + 3 t1 + 9 t2 + 27 t3 + 81 t4. Every row is padded to a
whole number of bytes.

File layout (all little-endian)::

    b"PQPK" | u8 version=1 | u8 format tag | u32 rows | u32 cols
    | u32 scale count | f32 scales[count] | payload
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quant import QuantOutput, QuantSpec

MAGIC = b"PQPK"
VERSION = 1
_HEADER = struct.Struct("<4sBBIII")


class PackError(ValueError):
    pass


class UnencodableLevel(PackError):
    pass


class CorruptPayload(PackError):
    pass


class PackFormat(enum.IntEnum):
    PACK1 = 1
    PACK_TRIT243 = 2
    PACK2 = 3
    PACK_TERNARY_AS_2BIT = 4
    PACK3 = 5
    PACK4 = 6

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def bits_per_weight(self) -> float:
        return 8 / 5 if self is PackFormat.PACK_TRIT243 else float(self.code_bits)

    @property
    def code_bits(self) -> int:
        """Bits per stored code (the trit format reports 2 for its digit range)."""
        return {1: 1, 2: 2, 3: 2, 4: 2, 5: 3, 6: 4}[int(self)]

    @property
    def level_table(self) -> np.ndarray:
        return _TABLES[self]

    @classmethod
    def parse(cls, name) -> "PackFormat":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        for fmt, label in _LABELS.items():
            if key in (label.lower(), label.lower().removeprefix("pack"), fmt.name.lower().replace("_", "")):
                return fmt
        raise ValueError(f"unknown pack format {name!r}; expected one of {list(_LABELS.values())}")

    @classmethod
    def for_spec(cls, spec: QuantSpec) -> "PackFormat":
        """Default storage format for a learnable quantizer's grid."""
        if spec.literal_ternary and spec.bitwidth == 1.58:
            raise ValueError("the 4-level literal ternary grid has no packed format")
        return {1: cls.PACK1, 1.58: cls.PACK_TRIT243, 2: cls.PACK2, 3: cls.PACK3, 4: cls.PACK4}[spec.bitwidth]


_LABELS = {
    PackFormat.PACK1: "Pack1",
    PackFormat.PACK_TRIT243: "PackTrit243",
    PackFormat.PACK2: "Pack2",
    PackFormat.PACK_TERNARY_AS_2BIT: "PackTernaryAs2Bit",
    PackFormat.PACK3: "Pack3",
    PackFormat.PACK4: "Pack4",
}

_TERNARY = (np.array([-1, 0, 1], dtype=np.float32) / np.float32(1.5)).astype(np.float32)
_TABLES = {
    PackFormat.PACK1: np.array([-1, 1], dtype=np.float32),
    PackFormat.PACK_TRIT243: _TERNARY,
    PackFormat.PACK2: ((2 * np.arange(4) - 3) / 4).astype(np.float32),
    PackFormat.PACK_TERNARY_AS_2BIT: _TERNARY,
    PackFormat.PACK3: np.arange(-4, 4, dtype=np.float32),
    PackFormat.PACK4: np.arange(-8, 8, dtype=np.float32),
}
for _t in _TABLES.values():
    _t.flags.writeable = False


def row_bytes(fmt: PackFormat, cols: int) -> int:
    if fmt is PackFormat.PACK_TRIT243:
        return math.ceil(cols / 5)
    return math.ceil(cols * fmt.code_bits / 8)


def storage_size(fmt, rows: int, cols: int) -> int:
    """Payload bytes for a rows x cols matrix, excluding the 4 bytes per scale."""
    return rows * row_bytes(PackFormat.parse(fmt), cols)


@dataclass(frozen=True)
class PackedMatrix:
    format: PackFormat
    rows: int
    cols: int
    payload: bytes
    scales: np.ndarray
    level_table: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "format", PackFormat(self.format))
        if self.level_table is None:
            object.__setattr__(self, "level_table", self.format.level_table)
        scales = np.ascontiguousarray(self.scales, dtype=np.float32).reshape(-1)
        scales.flags.writeable = False
        object.__setattr__(self, "scales", scales)
        expected = storage_size(self.format, self.rows, self.cols)
        if len(self.payload) != expected:
            raise CorruptPayload(f"payload has {len(self.payload)} bytes, expected {expected}")
        if scales.size not in (1, self.rows) and self.rows > 0:
            raise PackError(f"{scales.size} scales for {self.rows} rows")

    @property
    def row_bytes(self) -> int:
        return row_bytes(self.format, self.cols)

    @property
    def row_scales(self) -> np.ndarray:
        """One scale per row (per-tensor scales are broadcast)."""
        if self.scales.size == self.rows:
            return self.scales
        return np.full(self.rows, self.scales[0] if self.scales.size else 1.0, dtype=np.float32)

    def payload_array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.rows, self.row_bytes)

    def scaled_levels(self) -> np.ndarray:
        """(rows, levels) float32 table of alpha_r * level, the dequantized values."""
        return (self.row_scales[:, None] * self.level_table[None, :]).astype(np.float32)


# --------------------------------------------------------------------------
# codes <-> bytes
# --------------------------------------------------------------------------

def levels_to_codes(w_hat, fmt) -> np.ndarray:
    """Map normalized levels to table indices; raise UnencodableLevel if off-table."""
    fmt = PackFormat.parse(fmt)
    w_hat = np.asarray(w_hat, dtype=np.float32)
    if w_hat.ndim == 1:
        w_hat = w_hat[None, :]
    table = fmt.level_table
    idx = np.clip(np.searchsorted(table, w_hat), 0, len(table) - 1)
    bad = table[idx] != w_hat
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise UnencodableLevel(f"level {w_hat[r, c]!r} at ({r}, {c}) is not in the {fmt.label} table")
    return idx.astype(np.uint8)


def pack_codes(codes, fmt) -> bytes:
    fmt = PackFormat.parse(fmt)
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise ValueError("codes must be 2-D")
    rows, cols = codes.shape
    if np.any(codes >= len(fmt.level_table)):
        raise UnencodableLevel(f"code >= {len(fmt.level_table)} for {fmt.label}")
    if rows == 0 or cols == 0:
        return b"\x00" * storage_size(fmt, rows, cols)
    if fmt is PackFormat.PACK_TRIT243:
        nb = row_bytes(fmt, cols)
        digits = np.zeros((rows, nb * 5), dtype=np.uint16)
        digits[:, :cols] = codes
        digits = digits.reshape(rows, nb, 5)
        weights = np.array([1, 3, 9, 27, 81], dtype=np.uint16)
        return (digits * weights).sum(axis=2).astype(np.uint8).tobytes()
    b = fmt.code_bits
    bits = ((codes[:, :, None] >> np.arange(b, dtype=np.uint8)) & 1).reshape(rows, cols * b)
    return np.packbits(bits, axis=1, bitorder="little").tobytes()


def unpack_codes(p: PackedMatrix) -> np.ndarray:
    """(rows, cols) uint8 codes; raise CorruptPayload on out-of-table codes."""
    rows, cols, fmt = p.rows, p.cols, p.format
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols), dtype=np.uint8)
    raw = p.payload_array()
    if fmt is PackFormat.PACK_TRIT243:
        if np.any(raw >= 243):
            raise CorruptPayload("trit byte >= 243")
        digits = (raw[:, :, None] // np.array([1, 3, 9, 27, 81], dtype=np.uint8)) % 3
        return np.ascontiguousarray(digits.reshape(rows, -1)[:, :cols])
    b = fmt.code_bits
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : cols * b].reshape(rows, cols, b)
    codes = (bits << np.arange(b, dtype=np.uint8)).sum(axis=2, dtype=np.uint8)
    if np.any(codes >= len(fmt.level_table)):
        raise CorruptPayload(f"code >= {len(fmt.level_table)} in {fmt.label} payload")
    return codes


# --------------------------------------------------------------------------
# public codec
# --------------------------------------------------------------------------

def encode(q: QuantOutput | np.ndarray, scales, fmt) -> PackedMatrix:
    """Pack normalized levels (``q.w_hat`` or a bare array) with their scales."""
    fmt = PackFormat.parse(fmt)
    w_hat = q.w_hat if isinstance(q, QuantOutput) else q
    w_hat = np.asarray(w_hat, dtype=np.float32)
    if w_hat.ndim == 1:
        w_hat = w_hat[None, :]
    codes = levels_to_codes(w_hat, fmt)
    rows, cols = codes.shape
    return PackedMatrix(fmt, rows, cols, pack_codes(codes, fmt), np.asarray(scales, dtype=np.float32))


def decode_levels(p: PackedMatrix) -> np.ndarray:
    """Normalized levels w_hat as float32."""
    return p.level_table[unpack_codes(p)]


def decode(p: PackedMatrix) -> np.ndarray:
    """Dequantized float32 matrix alpha_r * w_hat."""
    codes = unpack_codes(p)
    if p.rows == 0:
        return np.zeros((0, p.cols), dtype=np.float32)
    return np.take_along_axis(p.scaled_levels(), codes.astype(np.intp), axis=1)


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def to_bytes(p: PackedMatrix) -> bytes:
    scales = p.scales.astype("<f4")
    head = _HEADER.pack(MAGIC, VERSION, int(p.format), p.rows, p.cols, scales.size)
    return head + scales.tobytes() + p.payload


def from_bytes(buf: bytes) -> PackedMatrix:
    if len(buf) < _HEADER.size:
        raise CorruptPayload("truncated header")
    magic, version, tag, rows, cols, n_scales = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptPayload(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptPayload(f"unsupported version {version}")
    try:
        fmt = PackFormat(tag)
    except ValueError:
        raise CorruptPayload(f"unknown format tag {tag}") from None
    off = _HEADER.size
    end_scales = off + 4 * n_scales
    expected = storage_size(fmt, rows, cols)
    if len(buf) < end_scales + expected:
        raise CorruptPayload(f"truncated payload: {len(buf)} bytes, need {end_scales + expected}")
    if len(buf) > end_scales + expected:
        raise CorruptPayload("trailing bytes after payload")
    scales = np.frombuffer(buf, dtype="<f4", count=n_scales, offset=off).astype(np.float32)
    return PackedMatrix(fmt, rows, cols, bytes(buf[end_scales:]), scales)


def save(p: PackedMatrix, path) -> None:
    Path(path).write_bytes(to_bytes(p))


def load(path) -> PackedMatrix:
    return from_bytes(Path(path).read_bytes())
