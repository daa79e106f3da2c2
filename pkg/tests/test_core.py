import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseloco.core import (
    ChunkGeometry,
    InvalidArgument,
    InvalidData,
    ParamVector,
    Rng,
    chunk_layout,
    chunk_tensor,
    effective_k,
    layout_digest,
    stable_key,
)

G = ChunkGeometry()


def covered(chunks, n):
    seen = np.zeros(n, dtype=int)
    for c in chunks:
        for pos in c.offsets:
            seen[pos] += 1
    return seen


class TestChunkTensor:
    def test_square_block(self):
        chunks = chunk_tensor((64, 64), G)
        assert len(chunks) == 1 and len(chunks[0]) == 4096

    def test_two_flat_chunks(self):
        chunks = chunk_tensor((8192,), G)
        assert [len(c) for c in chunks] == [4096, 4096]

    def test_partial_chunk_covers_everything_once(self):
        chunks = chunk_tensor((100,), G)
        assert [len(c) for c in chunks] == [100]
        assert np.all(covered(chunks, 100) == 1)

    def test_block_order_is_row_major_within_block(self):
        chunks = chunk_tensor((128, 64), G)
        assert len(chunks) == 2
        # second block starts 64 rows down
        assert chunks[1].offsets[0] == 64 * 64
        assert list(chunks[0].offsets[:3]) == [0, 1, 2]
        assert chunks[0].offsets[64] == 64

    def test_non_multiple_matrix_falls_back_to_flat(self):
        chunks = chunk_tensor((65, 64), G)
        assert [len(c) for c in chunks] == [4096, 64]

    def test_empty_shape_rejected(self):
        with pytest.raises(InvalidArgument):
            chunk_tensor((0,), G)

    @given(
        st.lists(
            st.one_of(
                st.tuples(st.integers(1, 9000)),
                st.tuples(st.sampled_from([64, 128]), st.sampled_from([64, 192])),
                st.tuples(st.integers(1, 70), st.integers(1, 70)),
            ),
            min_size=1,
            max_size=4,
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_layout_tiles_exactly(self, shapes):
        layout = [(f"t{i}", s) for i, s in enumerate(shapes)]
        n = sum(int(np.prod(s)) for s in shapes)
        chunks = chunk_layout(layout, G)
        assert np.all(covered(chunks, n) == 1)
        assert all(1 <= len(c) <= 4096 for c in chunks)


class TestEffectiveK:
    @pytest.mark.parametrize("n,k", [(4096, 64), (1, 1), (100, 1), (64, 1), (2048, 32), (4095, 63)])
    def test_values(self, n, k):
        assert effective_k(n, G) == k

    @given(st.integers(1, 4096), st.integers(1, 4096))
    def test_bounds_and_monotone(self, n, k):
        g = ChunkGeometry(k=k)
        e = effective_k(n, g)
        assert 1 <= e <= max(1, k)
        assert e <= n
        if n < 4096:
            assert effective_k(n + 1, g) >= e

    def test_out_of_range(self):
        with pytest.raises(InvalidArgument):
            effective_k(0, G)
        with pytest.raises(InvalidArgument):
            effective_k(4097, G)


class TestParamVector:
    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidData):
            ParamVector(np.array([1.0, np.nan]), (("w", (2,)),))

    def test_rejects_length_mismatch(self):
        with pytest.raises(InvalidArgument):
            ParamVector(np.zeros(3), (("w", (2,)),))

    def test_values_read_only(self):
        p = ParamVector.zeros((("w", (2, 2)),))
        with pytest.raises(ValueError):
            p.values[0] = 1.0

    def test_tensors_and_digest(self):
        p = ParamVector(np.arange(6.0), (("a", (2, 2)), ("b", (2,))))
        t = p.tensors()
        assert t["a"].shape == (2, 2) and list(t["b"]) == [4.0, 5.0]
        q = p.with_values(np.arange(6.0))
        assert p == q and p.digest() == q.digest()
        assert p.with_values(-np.zeros(6)).digest() != ParamVector.zeros(p.layout).digest()

    def test_layout_digest_distinguishes_shapes(self):
        assert layout_digest([("w", (2, 3))]) != layout_digest([("w", (3, 2))])
        assert len(layout_digest([("w", (4,))])) == 32


class TestRng:
    def test_same_counters_same_stream(self):
        r = Rng(7, 3)
        a = r.generator(1, "peer").standard_normal(5)
        b = r.generator(1, "peer").standard_normal(5)
        assert np.array_equal(a, b)

    def test_distinct_streams(self):
        a = Rng(7, 3).generator(1).standard_normal(5)
        b = Rng(7, 4).generator(1).standard_normal(5)
        c = Rng(8, 3).generator(1).standard_normal(5)
        assert not np.array_equal(a, b) and not np.array_equal(a, c)

    def test_stable_key(self):
        assert stable_key(5) == 5
        assert stable_key("abc") == stable_key("abc") != stable_key("abd")
        with pytest.raises(InvalidArgument):
            stable_key(-1)
