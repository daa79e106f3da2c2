"""Shared numeric types, chunk geometry and seeded randomness."""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InvalidArgument(ValueError):
    pass


class InvalidData(ValueError):
    pass


Shape = tuple[int, ...]
LayoutRecord = tuple[str, Shape]


def _numel(shape: Shape) -> int:
    return int(math.prod(shape))


def layout_digest(layout: Sequence[LayoutRecord]) -> bytes:
    """sha256 over a canonical text rendering of the layout (32 bytes)."""
    h = hashlib.sha256()
    for tensor_id, shape in layout:
        h.update(tensor_id.encode("utf-8"))
        h.update(b":")
        h.update(",".join(str(int(s)) for s in shape).encode("ascii"))
        h.update(b";")
    return h.digest()


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter vector plus the tensor layout it was flattened from."""

    values: np.ndarray
    layout: tuple[LayoutRecord, ...]

    def __post_init__(self):
        layout = tuple((str(t), tuple(int(s) for s in shape)) for t, shape in self.layout)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != sum(_numel(s) for _, s in layout):
            raise InvalidArgument(
                f"vector length {values.size} does not match layout size "
                f"{sum(_numel(s) for _, s in layout)}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidData("parameter vector contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, layout: Sequence[LayoutRecord]) -> ParamVector:
        n = sum(_numel(tuple(s)) for _, s in layout)
        return cls(np.zeros(n), tuple(layout))

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and self.values.tobytes() == other.values.tobytes()

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)

    def same_layout(self, other: ParamVector) -> None:
        if self.layout != other.layout:
            raise InvalidArgument("layout mismatch")

    @property
    def layout_digest(self) -> bytes:
        return layout_digest(self.layout)

    def digest(self) -> str:
        """Hex sha256 of the raw float64 bytes; equal digests mean bitwise-equal params."""
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def tensors(self) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for tensor_id, shape in self.layout:
            n = _numel(shape)
            out[tensor_id] = self.values[pos : pos + n].reshape(shape)
            pos += n
        return out


@dataclass(frozen=True)
class ChunkGeometry:
    chunk_2d: int = 64
    chunk_1d: int = 4096
    k: int = 64

    def __post_init__(self):
        if self.chunk_2d ** 2 != self.chunk_1d:
            raise InvalidArgument("chunk_2d squared must equal chunk_1d")
        if not 1 <= self.k <= self.chunk_1d:
            raise InvalidArgument(f"k must lie in [1, {self.chunk_1d}], got {self.k}")

    @property
    def C(self) -> int:
        return self.chunk_1d


@dataclass(frozen=True, eq=False)
class Chunk:
    """One chunk: the flat positions it covers, listed in within-chunk order."""

    tensor_id: str
    offsets: np.ndarray

    def __len__(self) -> int:
        return self.offsets.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Chunk):
            return NotImplemented
        return self.tensor_id == other.tensor_id and np.array_equal(self.offsets, other.offsets)


def chunk_tensor(shape: Shape, geometry: ChunkGeometry, tensor_id: str = "", base: int = 0) -> list[Chunk]:
    """Tile one tensor into chunks.

    2-D tensors whose sides are both multiples of ``chunk_2d`` are cut into square
    blocks in row-major block order; anything else is flattened and cut into
    contiguous runs of ``chunk_1d`` (the last run may be short). Offsets are flat
    row-major positions shifted by ``base``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise InvalidArgument(f"cannot chunk empty shape {shape!r}")
    b = geometry.chunk_2d
    chunks = []
    if len(shape) == 2 and shape[0] % b == 0 and shape[1] % b == 0:
        rows, cols = shape
        local = (np.arange(b)[:, None] * cols + np.arange(b)[None, :]).reshape(-1)
        for br in range(rows // b):
            for bc in range(cols // b):
                start = br * b * cols + bc * b
                chunks.append(Chunk(tensor_id, (local + start + base).astype(np.int64)))
        return chunks
    n = _numel(shape)
    for start in range(0, n, geometry.chunk_1d):
        stop = min(start + geometry.chunk_1d, n)
        chunks.append(Chunk(tensor_id, np.arange(start + base, stop + base, dtype=np.int64)))
    return chunks


def chunk_layout(layout: Iterable[LayoutRecord], geometry: ChunkGeometry) -> tuple[Chunk, ...]:
    """Chunks of every tensor, in layout order, with offsets into the flat vector."""
    return _chunk_layout(tuple((str(t), tuple(int(x) for x in s)) for t, s in layout), geometry)


def layout_size(layout: Iterable[LayoutRecord]) -> int:
    return sum(_numel(tuple(s)) for _, s in layout)


@functools.lru_cache(maxsize=64)
def _chunk_layout(layout: tuple, geometry: ChunkGeometry) -> tuple[Chunk, ...]:
    chunks, pos = [], 0
    for tensor_id, shape in layout:
        chunks.extend(chunk_tensor(shape, geometry, tensor_id=tensor_id, base=pos))
        pos += _numel(tuple(shape))
    for ch in chunks:
        ch.offsets.flags.writeable = False
    return tuple(chunks)


def effective_k(chunk_len: int, geometry: ChunkGeometry) -> int:
    """Selections for a chunk of ``chunk_len`` positions: proportional floor, at least 1."""
    if not 1 <= chunk_len <= geometry.chunk_1d:
        raise InvalidArgument(f"chunk_len must lie in [1, {geometry.chunk_1d}], got {chunk_len}")
    return max(1, (geometry.k * chunk_len) // geometry.chunk_1d)


def stable_key(value) -> int:
    """Map ints or strings to a 64-bit non-negative int, identically on every platform."""
    if isinstance(value, (int, np.integer)):
        if value < 0:
            raise InvalidArgument("stream counters must be non-negative")
        return int(value)
    digest = hashlib.blake2b(str(value).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass(frozen=True)
class Rng:
    """Counter-based stream factory: ``(seed, stream_id, *counters)`` fixes the draws."""

    seed: int
    stream_id: int = 0

    @classmethod
    def for_purpose(cls, seed: int, purpose: str) -> Rng:
        return cls(int(seed), stable_key(purpose))

    def generator(self, *counters) -> np.random.Generator:
        entropy = [stable_key(self.seed), self.stream_id, *(stable_key(c) for c in counters)]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
