"""Chunk-wise Top-k + 2-bit quantization, 12-bit index packing and the wire format.

Wire layout (all integers big-endian)::

    header   magic "SLC1" | version u8 | base_round u64 | peer_id 16B | layout digest 32B | n_chunks u32
    runs     (run_len u32, count u16)*   -- consecutive chunks sharing one selection count
    chunks   v1: scale_lo f16 | scale_hi f16 | 12-bit indices | 2-bit codes
             v2: 12-bit indices | float64 values            (unquantized, lossless mode)
    trailer  crc32 u32 over everything above

Bit fields are MSB-first and each packed field is zero-padded to a byte boundary.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Chunk, ChunkGeometry, InvalidArgument, InvalidData, effective_k

MAGIC = b"SLC1"
VERSION_QUANTIZED = 1
VERSION_RAW = 2
HEADER = struct.Struct(">4sBQ16s32sI")
RUN = struct.Struct(">IH")
TRAILER = struct.Struct(">I")
INDEX_BITS = 12
CODE_BITS = 2
MAX_INDEX = 1 << INDEX_BITS
PEER_ID_BYTES = 16

assert HEADER.size == 65


class FormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CompressedChunk:
    """Selected positions of one chunk and their encoded values.

    Quantized chunks carry ``codes`` (bit 1: sign, bit 0: high bucket) and two
    half-precision scales; raw chunks carry the float64 ``values`` instead.
    """

    indices: np.ndarray
    codes: np.ndarray | None = None
    scale_lo: float = 0.0
    scale_hi: float = 0.0
    values: np.ndarray | None = None

    @property
    def quantized(self) -> bool:
        return self.codes is not None

    def __len__(self) -> int:
        return self.indices.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedChunk):
            return NotImplemented
        if self.quantized != other.quantized or not np.array_equal(self.indices, other.indices):
            return False
        if self.quantized:
            return (
                np.array_equal(self.codes, other.codes)
                and _f16_bits(self.scale_lo) == _f16_bits(other.scale_lo)
                and _f16_bits(self.scale_hi) == _f16_bits(other.scale_hi)
            )
        return self.values.tobytes() == other.values.tobytes()

    def validate(self) -> None:
        idx = self.indices
        if idx.size == 0 or idx.size > MAX_INDEX:
            raise InvalidData(f"chunk selection count {idx.size} out of range")
        if np.any(idx >= MAX_INDEX) or np.any(np.diff(idx.astype(np.int64)) <= 0):
            raise InvalidData("chunk indices must be strictly increasing and < 4096")
        if self.quantized:
            if self.codes.size != idx.size or np.any(self.codes > 3):
                raise InvalidData("codes must be 2-bit symbols, one per index")
            lo, hi = self.scale_lo, self.scale_hi
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0 or hi < lo:
                raise InvalidData(f"bad chunk scales lo={lo} hi={hi}")
        else:
            if self.values is None or self.values.size != idx.size:
                raise InvalidData("raw chunk needs one value per index")
            if not np.all(np.isfinite(self.values)):
                raise InvalidData("raw chunk values must be finite")

    def decode(self) -> np.ndarray:
        return decode_chunk(self)


@dataclass(frozen=True, eq=False)
class CompressedDelta:
    base_round: int
    peer_id: str
    chunks: tuple[CompressedChunk, ...]
    layout_digest: bytes

    @property
    def quantized(self) -> bool:
        return all(c.quantized for c in self.chunks) if self.chunks else True

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedDelta):
            return NotImplemented
        return (
            self.base_round == other.base_round
            and self.peer_id == other.peer_id
            and self.layout_digest == other.layout_digest
            and len(self.chunks) == len(other.chunks)
            and all(a == b for a, b in zip(self.chunks, other.chunks))
        )

    def with_peer_id(self, peer_id: str) -> CompressedDelta:
        return CompressedDelta(self.base_round, peer_id, self.chunks, self.layout_digest)

    def validate(self) -> None:
        if not 0 <= self.base_round < 1 << 64:
            raise InvalidData("base_round out of range")
        _encode_peer_id(self.peer_id)
        if len(self.layout_digest) != 32:
            raise InvalidData("layout digest must be 32 bytes")
        kinds = {c.quantized for c in self.chunks}
        if len(kinds) > 1:
            raise InvalidData("mixed quantized and raw chunks")
        for c in self.chunks:
            c.validate()


def _f16_bits(x: float) -> int:
    return int(np.array(x, dtype=np.float16).view(np.uint16))


def to_half(x: float) -> float:
    # 65520 is the smallest magnitude that rounds to infinity in binary16
    if not abs(x) < 65520.0:
        raise InvalidData(f"scale {x!r} is not representable in half precision")
    return float(np.float16(x))


# ---------------------------------------------------------------------------
# selection and quantization


def topk_select(buffer: np.ndarray, k_eff: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest-magnitude ``k_eff`` entries; ties go to the lower index; indices ascending."""
    buffer = np.asarray(buffer, dtype=np.float64)
    if not 0 < k_eff <= buffer.size:
        raise InvalidArgument(f"k_eff={k_eff} invalid for buffer of length {buffer.size}")
    if not np.all(np.isfinite(buffer)):
        raise InvalidData("non-finite value in compression buffer")
    if k_eff == buffer.size:
        idx = np.arange(buffer.size)
    else:
        order = np.argsort(-np.abs(buffer), kind="stable")
        idx = np.sort(order[:k_eff])
    return idx, buffer[idx]


def quantize_chunk(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Map values onto {-hi, -lo, +lo, +hi}; returns (codes, scale_lo, scale_hi).

    The threshold is the mean magnitude; each bucket's scale is its mean magnitude
    (the high scale falls back to the threshold when that bucket is empty). Scales
    are rounded to half precision here so decoding is idempotent.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise InvalidArgument("cannot quantize an empty chunk")
    if not np.all(np.isfinite(values)):
        raise InvalidData("non-finite value passed to quantizer")
    mag = np.abs(values)
    tau = float(mag.mean())
    high = mag > tau
    lo = float(mag[~high].mean()) if np.any(~high) else 0.0
    hi = float(mag[high].mean()) if np.any(high) else tau
    codes = ((values < 0).astype(np.uint8) << 1) | high.astype(np.uint8)
    return codes, to_half(lo), to_half(hi)


def decode_chunk(chunk: CompressedChunk) -> np.ndarray:
    if not chunk.quantized:
        return np.array(chunk.values, dtype=np.float64)
    table = np.array([chunk.scale_lo, chunk.scale_hi, -chunk.scale_lo, -chunk.scale_hi])
    return table[chunk.codes]


def compress_chunk(buffer: np.ndarray, k_eff: int, quantize: bool = True) -> CompressedChunk:
    idx, vals = topk_select(buffer, k_eff)
    idx = idx.astype(np.uint16)
    if not quantize:
        return CompressedChunk(indices=idx, values=vals.copy())
    codes, lo, hi = quantize_chunk(vals)
    return CompressedChunk(indices=idx, codes=codes, scale_lo=lo, scale_hi=hi)


def compress_dense(
    buffer: np.ndarray,
    chunks: Sequence[Chunk],
    geometry: ChunkGeometry,
    quantize: bool = True,
) -> tuple[list[CompressedChunk], np.ndarray]:
    """Compress a whole flat vector chunk by chunk; also returns the dense decode."""
    decoded = np.zeros_like(buffer, dtype=np.float64)
    out = []
    for ch in chunks:
        seg = buffer[ch.offsets]
        cc = compress_chunk(seg, effective_k(len(ch), geometry), quantize=quantize)
        decoded[ch.offsets[cc.indices]] = decode_chunk(cc)
        out.append(cc)
    return out, decoded


def decode_dense(delta: CompressedDelta, chunks: Sequence[Chunk], size: int, geometry: ChunkGeometry) -> np.ndarray:
    """Dense decode against a known chunk tiling; rejects deltas that do not fit it."""
    if len(delta.chunks) != len(chunks):
        raise InvalidData(f"delta has {len(delta.chunks)} chunks, layout tiles into {len(chunks)}")
    dense = np.zeros(size, dtype=np.float64)
    for cc, ch in zip(delta.chunks, chunks):
        if len(cc) != effective_k(len(ch), geometry):
            raise InvalidData("chunk selection count does not match the layout")
        if cc.indices.size and int(cc.indices[-1]) >= len(ch):
            raise InvalidData("chunk index beyond chunk length")
        dense[ch.offsets[cc.indices]] = decode_chunk(cc)
    return dense


# ---------------------------------------------------------------------------
# bit packing


def _pack_fields(values: np.ndarray, width: int) -> bytes:
    if values.size == 0:
        return b""
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint32)
    bits = (values.astype(np.uint32)[:, None] >> shifts) & 1
    return np.packbits(bits.astype(np.uint8).reshape(-1)).tobytes()


def _unpack_fields(data: bytes, count: int, width: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.uint16)
    nbytes = (count * width + 7) // 8
    if len(data) < nbytes:
        raise FormatError("packed field truncated")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes))[: count * width]
    weights = (1 << np.arange(width - 1, -1, -1)).astype(np.uint32)
    return (bits.reshape(count, width).astype(np.uint32) @ weights).astype(np.uint16)


def pack_indices(indices) -> bytes:
    """12 bits per index, MSB first, zero padded to a byte boundary."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if np.any(idx < 0) or np.any(idx >= MAX_INDEX):
        raise InvalidArgument("indices must lie in [0, 4096)")
    return _pack_fields(idx, INDEX_BITS)


def unpack_indices(data: bytes, count: int) -> np.ndarray:
    return _unpack_fields(data, count, INDEX_BITS)


def pack_codes(codes) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if np.any(codes > 3):
        raise InvalidArgument("codes must be 2-bit")
    return _pack_fields(codes, CODE_BITS)


def unpack_codes(data: bytes, count: int) -> np.ndarray:
    return _unpack_fields(data, count, CODE_BITS).astype(np.uint8)


def _index_bytes(n: int) -> int:
    return (n * INDEX_BITS + 7) // 8


def _code_bytes(n: int) -> int:
    return (n * CODE_BITS + 7) // 8


# ---------------------------------------------------------------------------
# wire format


def _encode_peer_id(peer_id: str) -> bytes:
    raw = peer_id.encode("utf-8")
    if len(raw) > PEER_ID_BYTES or b"\x00" in raw or not raw:
        raise InvalidData(f"peer id {peer_id!r} must be 1-16 bytes with no NUL")
    return raw.ljust(PEER_ID_BYTES, b"\x00")


def _decode_peer_id(raw: bytes) -> str:
    stripped = raw.rstrip(b"\x00")
    if not stripped or b"\x00" in stripped:
        raise InvalidData("malformed peer id field")
    try:
        return stripped.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidData("peer id is not utf-8") from exc


def _runs(counts: Sequence[int]) -> list[tuple[int, int]]:
    runs: list[list[int]] = []
    for c in counts:
        if runs and runs[-1][1] == c:
            runs[-1][0] += 1
        else:
            runs.append([1, c])
    return [(a, b) for a, b in runs]


def serialize(delta: CompressedDelta) -> bytes:
    delta.validate()
    version = VERSION_QUANTIZED if delta.quantized else VERSION_RAW
    parts = [
        HEADER.pack(
            MAGIC,
            version,
            delta.base_round,
            _encode_peer_id(delta.peer_id),
            delta.layout_digest,
            len(delta.chunks),
        )
    ]
    for run_len, count in _runs([len(c) for c in delta.chunks]):
        parts.append(RUN.pack(run_len, count))
    for c in delta.chunks:
        if version == VERSION_QUANTIZED:
            parts.append(np.array([c.scale_lo, c.scale_hi], dtype=">f2").tobytes())
            parts.append(pack_indices(c.indices))
            parts.append(pack_codes(c.codes))
        else:
            parts.append(pack_indices(c.indices))
            parts.append(np.asarray(c.values, dtype=">f8").tobytes())
    body = b"".join(parts)
    return body + TRAILER.pack(zlib.crc32(body))


def deserialize(data: bytes) -> CompressedDelta:
    data = bytes(data)
    if len(data) < HEADER.size + TRAILER.size:
        raise FormatError("payload truncated")
    magic, version, base_round, peer_raw, digest, n_chunks = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version not in (VERSION_QUANTIZED, VERSION_RAW):
        raise FormatError(f"unsupported version {version}")
    body, (crc,) = data[: -TRAILER.size], TRAILER.unpack_from(data, len(data) - TRAILER.size)
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch")

    pos = HEADER.size
    counts: list[int] = []
    while len(counts) < n_chunks:
        if pos + RUN.size > len(body):
            raise FormatError("run table truncated")
        run_len, count = RUN.unpack_from(body, pos)
        pos += RUN.size
        if run_len == 0 or len(counts) + run_len > n_chunks:
            raise InvalidData("run table inconsistent with chunk count")
        if not 1 <= count <= MAX_INDEX:
            raise InvalidData(f"chunk selection count {count} out of range")
        counts.extend([count] * run_len)

    chunks = []
    for n in counts:
        if version == VERSION_QUANTIZED:
            need = 4 + _index_bytes(n) + _code_bytes(n)
            if pos + need > len(body):
                raise FormatError("chunk payload truncated")
            lo, hi = (float(x) for x in np.frombuffer(body, dtype=">f2", count=2, offset=pos))
            pos += 4
            idx = unpack_indices(body[pos : pos + _index_bytes(n)], n)
            pos += _index_bytes(n)
            codes = unpack_codes(body[pos : pos + _code_bytes(n)], n)
            pos += _code_bytes(n)
            chunks.append(CompressedChunk(indices=idx, codes=codes, scale_lo=lo, scale_hi=hi))
        else:
            need = _index_bytes(n) + 8 * n
            if pos + need > len(body):
                raise FormatError("chunk payload truncated")
            idx = unpack_indices(body[pos : pos + _index_bytes(n)], n)
            pos += _index_bytes(n)
            vals = np.frombuffer(body, dtype=">f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            chunks.append(CompressedChunk(indices=idx, values=vals))
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after last chunk")

    delta = CompressedDelta(int(base_round), _decode_peer_id(peer_raw), tuple(chunks), bytes(digest))
    delta.validate()
    return delta


# ---------------------------------------------------------------------------
# overhead arithmetic


def index_entropy_bound(C: int, k: int) -> float:
    """Bits per transmitted value needed to name a k-subset of C positions: log2(C choose k) / k."""
    if not 1 <= k <= C:
        raise InvalidArgument("need 1 <= k <= C")
    log_binom = math.lgamma(C + 1) - math.lgamma(k + 1) - math.lgamma(C - k + 1)
    return max(0.0, log_binom / math.log(2) / k)


def compression_ratio(geometry: ChunkGeometry, dense_bits: float = 32, wire_bits_per_selected: float = 14) -> float:
    """Idealized dense/compressed ratio, ignoring scales and headers."""
    if dense_bits <= 0 or wire_bits_per_selected <= 0:
        raise InvalidArgument("bit widths must be positive")
    return dense_bits * geometry.C / (geometry.k * wire_bits_per_selected)


def measured_compression_ratio(payload: bytes | int, n_values: int, dense_bits: float = 32) -> float:
    nbytes = payload if isinstance(payload, int) else len(payload)
    return dense_bits * n_values / (8 * nbytes)


def serialized_size(counts: Sequence[int], quantized: bool = True) -> int:
    """Exact byte length ``serialize`` produces for chunks with these selection counts."""
    size = HEADER.size + TRAILER.size + RUN.size * len(_runs(counts))
    for n in counts:
        size += _index_bytes(n) + (4 + _code_bytes(n) if quantized else 8 * n)
    return size
