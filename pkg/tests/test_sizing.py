import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdz import sizing
from qdz.quantcore import UniformScheme, quantize
from qdz.sizing import (
    ContainerError,
    LayerRecord,
    entropy_bits,
    huffman_build,
    huffman_decode,
    huffman_encode,
    huffman_from_indices,
    model_size_report,
    pack_indices,
    read_container,
    size_gain,
    unpack_indices,
    write_container,
)


def brute_force_min_length(counts):
    """Minimum mean length over all prefix codes, by enumerating every
    length assignment that satisfies Kraft (any such set is realizable)."""
    syms = [c for c in counts if c > 0]
    n = len(syms)
    best = math.inf
    for lengths in itertools.product(range(1, n), repeat=n):
        if sum(2.0**-l for l in lengths) <= 1:
            best = min(best, sum(c * l for c, l in zip(syms, lengths)))
    return best / sum(syms)


def is_prefix_free(words):
    words = sorted(words)
    return all(not b.startswith(a) for a, b in zip(words, words[1:]))


class TestSizeGain:
    def test_quoted_values(self):
        assert size_gain(2, 256, 32) == pytest.approx(14.2222, abs=1e-4)
        assert size_gain(4, 512, 32) == pytest.approx(7.7576, abs=1e-4)

    def test_full_width(self):
        assert size_gain(32, 256, 32) == pytest.approx(8192 / 8256)

    @pytest.mark.parametrize("args", [(0, 256, 32), (2, 0, 32), (2, 256, -1)])
    def test_rejects_non_positive(self, args):
        with pytest.raises(ValueError):
            size_gain(*args)

    @given(st.integers(1, 16), st.integers(1, 4096), st.integers(1, 64))
    def test_monotone(self, b, k, f):
        assert size_gain(b, k + 1, f) > size_gain(b, k, f)
        assert size_gain(b + 1, k, f) < size_gain(b, k, f)


class TestHuffman:
    def test_three_symbols(self):
        code = huffman_build({0: 2, 1: 1, 2: 1})
        assert code.mean_length == 1.5

    def test_balanced(self):
        code = huffman_build([5, 5, 5, 5])
        assert set(code.lengths.values()) == {2}
        assert code.mean_length == 2.0

    def test_single_symbol(self):
        code = huffman_build({3: 100})
        assert code.lengths == {3: 0}
        assert huffman_encode([3] * 100, code) == b""
        np.testing.assert_array_equal(huffman_decode(b"", code, 100), [3] * 100)

    def test_empty_histogram(self):
        with pytest.raises(ValueError):
            huffman_build({})
        with pytest.raises(ValueError):
            huffman_build([0, 0])

    def test_deterministic_ties(self):
        a = huffman_build({i: 1 for i in range(7)})
        b = huffman_build({i: 1 for i in reversed(range(7))})
        assert a.lengths == b.lengths

    @given(st.lists(st.integers(1, 1000), min_size=2, max_size=40))
    def test_kraft_equality_and_entropy_sandwich(self, counts):
        code = huffman_build(counts)
        assert sum(2.0 ** -l for l in code.lengths.values()) == 1.0
        words = [code.bitstring(s) for s in code.lengths]
        assert is_prefix_free(words)
        h = entropy_bits(counts)
        assert h - 1e-12 <= code.mean_length < h + 1

    @given(st.lists(st.integers(1, 50), min_size=2, max_size=6))
    @settings(max_examples=60)
    def test_optimal_against_brute_force(self, counts):
        assert huffman_build(counts).mean_length == pytest.approx(brute_force_min_length(counts))

    def test_encode_length_example(self):
        code = huffman_build({0: 2, 1: 1, 2: 1})
        idx = [0, 0, 1, 2]
        stream = huffman_encode(idx, code)
        assert code.encoded_bits() == 6
        assert len(stream) == 1
        np.testing.assert_array_equal(huffman_decode(stream, code, 4), idx)

    def test_empty_sequence(self):
        code = huffman_build({0: 2, 1: 1})
        assert huffman_encode([], code) == b""
        assert huffman_decode(b"", code, 0).size == 0

    def test_zipf_round_trip(self):
        rng = np.random.default_rng(4)
        idx = np.minimum(rng.zipf(1.5, 10_000) - 1, 15)
        code = huffman_from_indices(idx)
        stream = huffman_encode(idx, code)
        np.testing.assert_array_equal(huffman_decode(stream, code, idx.size), idx)
        assert len(stream) == -(-code.encoded_bits() // 8)
        counts = np.bincount(idx)
        h = entropy_bits(counts)
        assert h <= code.mean_length < h + 1

    def test_unknown_symbol(self):
        with pytest.raises(ValueError):
            huffman_encode([9], huffman_build({0: 1, 1: 1}))

    def test_truncated_stream(self):
        code = huffman_build({0: 2, 1: 1, 2: 1})
        with pytest.raises(ContainerError):
            huffman_decode(huffman_encode([1, 2, 1, 2, 1], code)[:1], code, 5)


class TestPacking:
    def test_two_bit_example(self):
        assert pack_indices([0, 1, 2, 3], 2) == bytes([0b00011011])

    def test_padding(self):
        assert pack_indices([15], 4) == b"\xf0"

    @pytest.mark.parametrize("b", [1, 2, 3, 4, 5, 8])
    def test_round_trip(self, b):
        idx = np.random.default_rng(b).integers(0, 2**b, 100_000)
        packed = pack_indices(idx, b)
        assert len(packed) == -(-idx.size * b // 8)
        np.testing.assert_array_equal(unpack_indices(packed, b, idx.size), idx)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            pack_indices([4], 2)
        with pytest.raises(ValueError):
            pack_indices([0], 9)


class TestSizeReport:
    def test_single_layer_formula(self):
        v = np.random.default_rng(0).normal(size=256)
        qv = quantize(v, 256, UniformScheme.from_bits(2))
        rep = model_size_report([qv], 32)
        assert rep.full_precision_bits == 8192
        assert rep.quantized_bits == 576
        assert rep.gain_plain == pytest.approx(8192 / 576)
        assert rep.gain_plain == pytest.approx(size_gain(2, 256, 32))

    def test_constant_indices(self):
        qv = quantize(np.zeros(512), 256, UniformScheme.from_bits(2))
        rep = model_size_report([qv], 32)
        assert rep.mean_code_length == 0.0
        assert rep.huffman_bits == 2 * 32 * 2

    def test_huffman_not_larger(self):
        v = np.random.default_rng(1).normal(size=5000)
        rep = model_size_report([quantize(v, 256, UniformScheme.from_bits(4))])
        assert rep.huffman_bits <= rep.quantized_bits
        assert rep.mean_code_length < 4

    def test_raw_vectors_kept_separate(self):
        qv = quantize(np.arange(256.0), 256, UniformScheme.from_bits(8))
        rep = model_size_report([("w", qv), ("b", np.zeros(10))])
        assert rep.unquantized_bits == 320
        assert rep.gain_plain == pytest.approx(size_gain(8, 256, 32))


def sample_records(seed=0):
    rng = np.random.default_rng(seed)
    uni = quantize(rng.normal(size=1000), 256, UniformScheme.from_bits(3))
    non = quantize(rng.normal(size=300), 128, points=np.sort(rng.random(5)))
    const = quantize(np.ones(40), 16, UniformScheme.from_bits(2))
    return [
        LayerRecord("fc0.weight", quantized=uni, encoding=sizing.ENC_PACKED),
        LayerRecord("fc0.weight.h", quantized=uni, encoding=sizing.ENC_HUFFMAN),
        LayerRecord("fc1.weight", quantized=non, encoding=sizing.ENC_HUFFMAN),
        LayerRecord("fc1.weight.p", quantized=non, encoding=sizing.ENC_PACKED),
        LayerRecord("const", quantized=const, encoding=sizing.ENC_HUFFMAN),
        LayerRecord("fc0.bias", raw=rng.normal(size=7)),
    ]


class TestContainer:
    def test_header(self):
        data = write_container(sample_records())
        assert data[:4] == b"QDZ1"
        assert int.from_bytes(data[4:6], "little") == 1
        assert int.from_bytes(data[6:8], "little") == 6

    def test_round_trip_bit_exact(self):
        recs = sample_records()
        data = write_container(recs)
        back = read_container(data)
        assert [r.name for r in back] == [r.name for r in recs]
        for a, b in zip(recs, back):
            if a.raw is not None:
                assert np.asarray(a.raw).tobytes() == b.raw.tobytes()
                continue
            qa, qb = a.quantized, b.quantized
            np.testing.assert_array_equal(qa.indices, qb.indices)
            assert qa.scaling.alphas.astype("<f4").tobytes() == qb.scaling.alphas.astype("<f4").tobytes()
            assert qa.scaling.betas.astype("<f4").tobytes() == qb.scaling.betas.astype("<f4").tobytes()
            assert (qa.scheme, qa.levels, qa.bits, qa.scaling.bucket_size) == (qb.scheme, qb.levels, qb.bits, qb.scaling.bucket_size)
            if qa.points is not None:
                assert qa.points.astype("<f4").tobytes() == qb.points.astype("<f4").tobytes()
        assert write_container(back) == data

    def test_crc_detects_corruption(self):
        data = bytearray(write_container(sample_records()[:1]))
        data[-6] ^= 0x01
        with pytest.raises(ContainerError, match="CRC"):
            read_container(bytes(data))

    def test_truncation_and_magic(self):
        data = write_container(sample_records())
        with pytest.raises(ContainerError):
            read_container(data[:-3])
        with pytest.raises(ContainerError):
            read_container(b"XXXX" + data[4:])

    def test_random_round_trips(self):
        rng = np.random.default_rng(9)
        for trial in range(20):
            n = int(rng.integers(1, 3000))
            b = int(rng.integers(1, 9))
            enc = int(rng.integers(0, 2))
            qv = quantize(rng.normal(size=n), int(rng.integers(1, 300)), UniformScheme.from_bits(b))
            (back,) = read_container(write_container([LayerRecord(f"l{trial}", quantized=qv, encoding=enc)]))
            np.testing.assert_array_equal(back.quantized.indices, qv.indices)
