"""Compression accounting: size gain, Huffman coding of level indices,
fixed-width packing and the ``QDZ1`` binary container."""

from __future__ import annotations

import heapq
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .quantcore import NONUNIFORM, UNIFORM, BucketScaling, QuantizedVector

MAGIC = b"QDZ1"
FORMAT_VERSION = 1

SCHEME_UNIFORM = 0
SCHEME_NONUNIFORM = 1
SCHEME_RAW = 2

ENC_PACKED = 0
ENC_HUFFMAN = 1

_ABSENT = 0xFF


class ContainerError(ValueError):
    """Malformed, truncated or corrupted container data."""


def size_gain(b: float, k: float, f: float) -> float:
    """Ratio of full-precision size to ``b``-bit indices plus two ``f``-bit
    scale factors per bucket of ``k`` weights: ``kf / (kb + 2f)``."""
    if b <= 0 or k <= 0 or f <= 0:
        raise ValueError(f"size_gain needs positive arguments, got b={b}, k={k}, f={f}")
    return k * f / (k * b + 2 * f)


# --- Huffman -------------------------------------------------------------


@dataclass(frozen=True)
class HuffmanCode:
    """A prefix code given as ``symbol -> (codeword, length)``.

    Codewords are assigned canonically from the lengths (shorter codes first,
    then by symbol), so the lengths alone determine the code.
    """

    lengths: dict[int, int]
    counts: dict[int, int]

    @property
    def codewords(self) -> dict[int, tuple[int, int]]:
        return _canonical(self.lengths)

    def bitstring(self, symbol: int) -> str:
        code, length = self.codewords[symbol]
        return format(code, f"0{length}b") if length else ""

    @property
    def mean_length(self) -> float:
        total = sum(self.counts.values())
        if total == 0:
            return 0.0
        return sum(self.counts[s] * self.lengths[s] for s in self.counts) / total

    def encoded_bits(self) -> int:
        return sum(self.counts[s] * self.lengths[s] for s in self.counts)


def _canonical(lengths: Mapping[int, int]) -> dict[int, tuple[int, int]]:
    out = {}
    code = 0
    prev_len = 0
    for sym, length in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0])):
        if length == 0:
            out[sym] = (0, 0)
            continue
        code <<= length - prev_len
        out[sym] = (code, length)
        code += 1
        prev_len = length
    return out


def huffman_build(counts) -> HuffmanCode:
    """Build an optimal prefix code from a symbol histogram.

    ``counts`` is a mapping ``symbol -> count`` or a sequence indexed by
    symbol. Zero-count symbols get no codeword. Equal weights are popped
    leaves first (lowest symbol), then merged nodes in creation order.
    """
    if not isinstance(counts, Mapping):
        counts = {i: int(c) for i, c in enumerate(counts)}
    counts = {int(s): int(c) for s, c in counts.items() if c > 0}
    if not counts:
        raise ValueError("cannot build a Huffman code from an empty histogram")
    if len(counts) == 1:
        return HuffmanCode({next(iter(counts)): 0}, counts)

    # heap entries: (weight, kind, order, symbols-under-node); kind 0 = leaf
    heap = [(c, 0, s, (s,)) for s, c in counts.items()]
    heapq.heapify(heap)
    lengths = dict.fromkeys(counts, 0)
    created = 0
    while len(heap) > 1:
        w1, _, _, syms1 = heapq.heappop(heap)
        w2, _, _, syms2 = heapq.heappop(heap)
        for s in syms1 + syms2:
            lengths[s] += 1
        heapq.heappush(heap, (w1 + w2, 1, created, syms1 + syms2))
        created += 1
    return HuffmanCode(lengths, counts)


def huffman_from_indices(indices) -> HuffmanCode:
    return huffman_build(Counter(int(i) for i in np.asarray(indices).ravel()))


def entropy_bits(counts) -> float:
    c = np.asarray(list(counts.values()) if isinstance(counts, Mapping) else counts, dtype=np.float64)
    c = c[c > 0]
    p = c / c.sum()
    return float(-(p * np.log2(p)).sum())


def huffman_encode(indices, code: HuffmanCode) -> bytes:
    """Concatenate codewords MSB-first; the last byte is zero-padded."""
    words = code.codewords
    table = {}
    for sym, (cw, length) in words.items():
        table[sym] = np.array([(cw >> (length - 1 - j)) & 1 for j in range(length)], dtype=np.uint8)
    chunks = []
    for i in np.asarray(indices).ravel():
        try:
            chunks.append(table[int(i)])
        except KeyError:
            raise ValueError(f"symbol {int(i)} has no codeword") from None
    if not chunks:
        return b""
    return np.packbits(np.concatenate(chunks)).tobytes()


def huffman_decode(stream: bytes, code: HuffmanCode, n: int) -> np.ndarray:
    words = code.codewords
    if len(words) == 1:
        (sym,) = words
        return np.full(n, sym, dtype=np.int64)
    lookup = {(cw, length): sym for sym, (cw, length) in words.items()}
    max_len = max(length for _, length in words.values())
    bits = np.unpackbits(np.frombuffer(stream, dtype=np.uint8)).tolist()
    out = np.empty(n, dtype=np.int64)
    pos = 0
    for k in range(n):
        cw = 0
        length = 0
        while True:
            if pos >= len(bits):
                raise ContainerError(f"bitstream truncated after {k} of {n} symbols")
            cw = (cw << 1) | bits[pos]
            pos += 1
            length += 1
            sym = lookup.get((cw, length))
            if sym is not None:
                out[k] = sym
                break
            if length > max_len:
                raise ContainerError("invalid codeword in bitstream")
    return out


# --- fixed-width packing -------------------------------------------------


def pack_indices(indices, b: int) -> bytes:
    """Pack indices at ``b`` bits each, MSB-first, zero-padding the last byte."""
    if not 1 <= b <= 8:
        raise ValueError(f"bit width must be in 1..8, got {b}")
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        return b""
    if idx.min() < 0 or idx.max() >= 1 << b:
        raise ValueError(f"index out of range for {b}-bit packing")
    shifts = np.arange(b - 1, -1, -1)
    bits = ((idx[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes()


def unpack_indices(data: bytes, b: int, n: int) -> np.ndarray:
    if not 1 <= b <= 8:
        raise ValueError(f"bit width must be in 1..8, got {b}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if bits.size < n * b:
        raise ContainerError(f"packed payload holds {bits.size // b} indices, expected {n}")
    weights = 1 << np.arange(b - 1, -1, -1)
    return bits[: n * b].reshape(n, b).astype(np.int64) @ weights


# --- size report ---------------------------------------------------------


@dataclass(frozen=True)
class SizeReport:
    """Sizes in bits. Scale overhead uses the ``2fN/k`` form, so a single
    uniform layer's ``gain_plain`` equals ``size_gain(b, k, f)`` exactly."""

    full_precision_bits: int
    quantized_bits: int
    huffman_bits: int
    gain_plain: float
    gain_huffman: float
    mean_code_length: float
    n_weights: int
    unquantized_bits: int = 0


def model_size_report(model: Iterable, f: int = 32) -> SizeReport:
    """Aggregate per-layer sizes. ``model`` yields QuantizedVectors (or
    ``(name, QuantizedVector)`` pairs); raw float arrays are counted as
    ``unquantized_bits`` and kept out of the gain ratios."""
    n_total = 0
    plain = Fraction(0)
    huff = Fraction(0)
    code_bits = 0
    raw_bits = 0
    for item in model:
        qv = item[1] if isinstance(item, tuple) else item
        if not isinstance(qv, QuantizedVector):
            raw_bits += f * np.asarray(qv).size
            continue
        n = qv.scaling.original_len
        overhead = Fraction(2 * f * n, qv.scaling.bucket_size)
        layer_code_bits = huffman_from_indices(qv.indices).encoded_bits()
        n_total += n
        plain += qv.bits * n + overhead
        huff += layer_code_bits + overhead
        code_bits += layer_code_bits
    fp = f * n_total
    plain_bits = math.ceil(plain)
    huff_bits = math.ceil(huff)
    return SizeReport(
        full_precision_bits=fp,
        quantized_bits=plain_bits,
        huffman_bits=huff_bits,
        gain_plain=float(Fraction(fp) / plain) if plain else float("inf"),
        gain_huffman=float(Fraction(fp) / huff) if huff else float("inf"),
        mean_code_length=code_bits / n_total if n_total else 0.0,
        n_weights=n_total,
        unquantized_bits=raw_bits,
    )


# --- container -----------------------------------------------------------


@dataclass
class LayerRecord:
    """One named vector in a container: quantized, or raw float64."""

    name: str
    quantized: QuantizedVector | None = None
    raw: np.ndarray | None = None
    encoding: int = ENC_PACKED


def _huffman_payload(qv: QuantizedVector) -> bytes:
    code = huffman_from_indices(qv.indices)
    table = bytes(code.lengths.get(s, _ABSENT) for s in range(qv.n_symbols))
    return struct.pack("<H", qv.n_symbols) + table + huffman_encode(qv.indices, code)


def _read_huffman_payload(payload: bytes, n: int) -> np.ndarray:
    if len(payload) < 2:
        raise ContainerError("huffman payload too short")
    (nsym,) = struct.unpack_from("<H", payload)
    table = payload[2 : 2 + nsym]
    if len(table) != nsym:
        raise ContainerError("huffman length table truncated")
    lengths = {s: ln for s, ln in enumerate(table) if ln != _ABSENT}
    if not lengths:
        if n:
            raise ContainerError("huffman table is empty")
        return np.zeros(0, dtype=np.int64)
    code = HuffmanCode(lengths, dict.fromkeys(lengths, 1))
    return huffman_decode(payload[2 + nsym :], code, n)


def write_container(records: Iterable[LayerRecord]) -> bytes:
    records = list(records)
    out = bytearray(MAGIC)
    out += struct.pack("<HH", FORMAT_VERSION, len(records))
    for rec in records:
        name = rec.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        if rec.quantized is None:
            raw = np.asarray(rec.raw, dtype="<f8").ravel()
            out += struct.pack("<BBIIQ", SCHEME_RAW, 64, 0, 0, raw.size)
            payload = raw.tobytes()
            out += struct.pack("<BQ", ENC_PACKED, len(payload)) + payload
        else:
            qv = rec.quantized
            sc = qv.scaling
            tag = SCHEME_UNIFORM if qv.scheme == UNIFORM else SCHEME_NONUNIFORM
            out += struct.pack("<BBIIQ", tag, qv.bits, qv.levels, sc.bucket_size, sc.original_len)
            pairs = np.empty(2 * sc.n_buckets, dtype="<f4")
            pairs[0::2] = sc.alphas
            pairs[1::2] = sc.betas
            out += pairs.tobytes()
            if tag == SCHEME_NONUNIFORM:
                out += np.asarray(qv.points, dtype="<f4").tobytes()
            if rec.encoding == ENC_HUFFMAN:
                payload = _huffman_payload(qv)
            else:
                payload = pack_indices(qv.indices, qv.bits)
            out += struct.pack("<BQ", rec.encoding, len(payload)) + payload
        out += struct.pack("<I", zlib.crc32(payload))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError("container truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(data: bytes) -> list[LayerRecord]:
    """Parse a container, verifying every layer's CRC32.

    Scale factors and points come back as float64 copies of the stored
    float32 values.
    """
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ContainerError("bad magic, not a QDZ1 container")
    version, n_layers = r.unpack("<HH")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    records = []
    for _ in range(n_layers):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, bits, levels, bucket_size, n = r.unpack("<BBIIQ")
        if tag == SCHEME_RAW:
            encoding, plen = r.unpack("<BQ")
            payload = r.take(plen)
            _check_crc(r, payload, name)
            if plen != 8 * n:
                raise ContainerError(f"raw layer {name!r} has wrong payload size")
            records.append(LayerRecord(name, raw=np.frombuffer(payload, dtype="<f8").astype(np.float64)))
            continue
        if tag not in (SCHEME_UNIFORM, SCHEME_NONUNIFORM) or bucket_size < 1:
            raise ContainerError(f"layer {name!r} has unknown scheme tag {tag}")
        n_buckets = -(-n // bucket_size)
        pairs = np.frombuffer(r.take(8 * n_buckets), dtype="<f4").astype(np.float64)
        scaling = BucketScaling(bucket_size, pairs[0::2].copy(), pairs[1::2].copy(), n)
        points = None
        if tag == SCHEME_NONUNIFORM:
            points = np.frombuffer(r.take(4 * levels), dtype="<f4").astype(np.float64)
        encoding, plen = r.unpack("<BQ")
        payload = r.take(plen)
        _check_crc(r, payload, name)
        if encoding == ENC_HUFFMAN:
            indices = _read_huffman_payload(payload, n)
        elif encoding == ENC_PACKED:
            indices = unpack_indices(payload, bits, n)
        else:
            raise ContainerError(f"layer {name!r} has unknown encoding tag {encoding}")
        scheme = UNIFORM if tag == SCHEME_UNIFORM else NONUNIFORM
        qv = QuantizedVector(indices, scaling, scheme, levels, points, bits)
        records.append(LayerRecord(name, quantized=qv, encoding=encoding))
    if r.pos != len(data):
        raise ContainerError("trailing bytes after last layer")
    return records


def _check_crc(r: _Reader, payload: bytes, name: str) -> None:
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(payload):
        raise ContainerError(f"CRC mismatch in layer {name!r}")
