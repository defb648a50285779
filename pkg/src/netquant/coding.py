"""Prefix codes, bit-exact serialization, and compression accounting.

A quantized model stores, for each of ``n`` parameters, the codeword of its
cluster, plus a lookup table holding the ``k`` cluster centers (at the
original parameter precision, ``b`` bits each) and the ``k`` codewords
themselves. The storage cost in bits is therefore

    sum_j (count_j + 1) * len_j  +  k * b

and the compression ratio is ``n * b`` divided by that. The serializer
mirrors this accounting exactly; fixed framing fields that the formula does
not charge for (magic, sizes, the canonical length table, end padding, and
the optional pruned-index section) are tracked separately in the breakdown
so formula and measurement cannot drift.

Binary layout of an encoded model (bits packed most-significant first,
padded to a byte boundary only at the very end):

    magic "NQ01"                          32 bits
    scheme (0 fixed, 1 huffman)            8
    flags (bit 0: index section present)   8
    source_bits b                          8
    k                                     32
    n (parameters encoded)                32
    total_params (pre-pruning count)      32
    centers, float32 each                 k * b      [charged by the ratio]
    codeword lengths, one byte each       k * 8
    codewords, canonical order            sum len_j  [charged by the ratio]
    payload, one codeword per parameter   sum count_j * len_j   [charged]
    index section (if flagged):
        n_positions                       32
        n_symbols                         32
        symbol values (index gaps)        n_symbols * 32
        symbol codeword lengths           n_symbols * 8
        gap payload                       one codeword per position

Codes are canonical (codewords ordered by length, then cluster index), so a
decoder rebuilds them from the length table alone; the stored codewords are
verified against the canonical reconstruction on decode.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .params import FormatError
from .quantizers import Codebook

MAGIC = b"NQ01"
_SCHEMES = {"fixed": 0, "huffman": 1}
_SCHEME_NAMES = {v: k for k, v in _SCHEMES.items()}


# ---------------------------------------------------------------------------
# Prefix codes
# ---------------------------------------------------------------------------


def _canonical_codewords(lengths) -> tuple[str, ...]:
    """Assign canonical codewords for the given lengths.

    Symbols are ordered by (length, index) and receive consecutive code
    values, left-shifted whenever the length grows. Raises if the lengths
    overflow the code space (Kraft sum above one).
    """
    lengths = [int(x) for x in lengths]
    if any(x < 1 for x in lengths):
        raise ValueError("codeword lengths must be positive")
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    codes = [""] * len(lengths)
    value = 0
    prev_len = lengths[order[0]]
    for rank, idx in enumerate(order):
        if rank > 0:
            value = (value + 1) << (lengths[idx] - prev_len)
            prev_len = lengths[idx]
        if value >> lengths[idx]:
            raise ValueError("lengths violate the Kraft inequality")
        codes[idx] = format(value, f"0{lengths[idx]}b")
    return tuple(codes)


@dataclass(frozen=True)
class PrefixCode:
    """A prefix-free binary code, one codeword per cluster."""

    lengths: tuple[int, ...]
    codewords: tuple[str, ...] = field(default=())
    scheme: str = "huffman"

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        lengths = tuple(int(x) for x in self.lengths)
        if not lengths:
            raise ValueError("empty code")
        object.__setattr__(self, "lengths", lengths)
        if not self.codewords:
            object.__setattr__(self, "codewords", _canonical_codewords(lengths))
        else:
            object.__setattr__(self, "codewords", tuple(self.codewords))
            if tuple(len(c) for c in self.codewords) != lengths:
                raise ValueError("codeword lengths disagree with the length table")
        if self.scheme == "fixed":
            width = max(1, math.ceil(math.log2(len(lengths)))) if len(lengths) > 1 else 1
            if any(l != width for l in lengths):
                raise ValueError("fixed scheme requires equal ceil(log2 k) lengths")
        if self.kraft_sum() > 1.0 + 1e-12:
            raise ValueError("Kraft inequality violated")
        for i, a in enumerate(self.codewords):
            for j, b in enumerate(self.codewords):
                if i != j and b.startswith(a):
                    raise ValueError("code is not prefix free")

    @property
    def k(self) -> int:
        return len(self.lengths)

    def kraft_sum(self) -> float:
        # Exact in binary arithmetic: sum of 2^(L - len) over symbols, as
        # an integer against 2^L.
        max_len = max(self.lengths)
        total = sum(1 << (max_len - l) for l in self.lengths)
        return total / float(1 << max_len)

    def avg_bits(self, counts) -> float:
        counts = np.asarray(counts, dtype=np.float64)
        if counts.shape != (self.k,):
            raise ValueError("counts length disagrees with the code")
        total = counts.sum()
        if total <= 0:
            raise ValueError("empty count vector")
        return float(np.dot(counts, np.asarray(self.lengths)) / total)


def huffman_lengths(counts) -> list[int]:
    """Optimal integer codeword lengths for the given positive counts."""
    counts = [int(c) for c in counts]
    if not counts:
        raise ValueError("empty count vector")
    if any(c <= 0 for c in counts):
        raise ValueError("counts must be positive; drop retired clusters first")
    k = len(counts)
    if k == 1:
        return [1]
    lengths = [0] * k
    heap = [(c, i, [i]) for i, c in enumerate(counts)]
    heapq.heapify(heap)
    tiebreak = k
    while len(heap) > 1:
        c1, _, m1 = heapq.heappop(heap)
        c2, _, m2 = heapq.heappop(heap)
        members = m1 + m2
        for i in members:
            lengths[i] += 1
        heapq.heappush(heap, (c1 + c2, tiebreak, members))
        tiebreak += 1
    return lengths


def build_huffman(codebook_or_counts) -> PrefixCode:
    """Canonical Huffman code for a codebook's cluster-size distribution."""
    counts = (
        codebook_or_counts.counts
        if isinstance(codebook_or_counts, Codebook)
        else codebook_or_counts
    )
    return PrefixCode(tuple(huffman_lengths(counts)), scheme="huffman")


def fixed_length_code(k: int) -> PrefixCode:
    """All codewords ceil(log2 k) bits; a single cluster still gets 1 bit."""
    if k < 1:
        raise ValueError("k must be at least 1")
    width = max(1, math.ceil(math.log2(k))) if k > 1 else 1
    return PrefixCode(tuple([width] * k), scheme="fixed")


def entropy_bits(codebook_or_counts) -> float:
    """Shannon entropy of the cluster-size distribution, in bits."""
    counts = (
        codebook_or_counts.counts
        if isinstance(codebook_or_counts, Codebook)
        else np.asarray(codebook_or_counts)
    )
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty count vector")
    p = counts[counts > 0] / total
    return float(-np.sum(p * np.log2(p)))


# ---------------------------------------------------------------------------
# Compression-ratio accounting
# ---------------------------------------------------------------------------


def compression_ratio_exact(n_params: int, source_bits: int, counts, code: PrefixCode) -> float:
    """Original bits over stored bits, counting the full lookup table.

    Stored bits are one codeword per parameter, one stored codeword per
    cluster, and one ``source_bits``-wide center per cluster.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (code.k,):
        raise ValueError("counts length disagrees with the code")
    if int(counts.sum()) != n_params:
        raise ValueError("counts do not sum to n_params")
    lengths = np.asarray(code.lengths, dtype=np.int64)
    denom = int(np.dot(counts + 1, lengths)) + code.k * source_bits
    return n_params * source_bits / denom


class EntropyRatio(NamedTuple):
    with_overhead: float
    approx: float


@dataclass(frozen=True)
class CompressionReport:
    """Everything a compression run claims about itself, in one record.

    ``ratio_exact`` is the formula value (payload, stored codewords, and
    center table); ``ratio_measured`` divides the same original size by the
    full serialized bit count, so it is at most ``ratio_exact``. Accuracies
    are ``None`` when no evaluation data was supplied.
    """

    entropy_bits: float
    avg_codeword_bits: float
    ratio_exact: float
    ratio_entropy_overhead: float
    ratio_entropy_approx: float
    ratio_measured: float
    k_effective: int
    n_params: int
    source_bits: int
    scheme: str
    bit_breakdown: dict
    accuracy_pre_finetune: float | None = None
    accuracy_post_finetune: float | None = None

    def as_dict(self) -> dict:
        return {
            "entropy_bits": self.entropy_bits,
            "avg_codeword_bits": self.avg_codeword_bits,
            "ratio_exact": self.ratio_exact,
            "ratio_entropy_overhead": self.ratio_entropy_overhead,
            "ratio_entropy_approx": self.ratio_entropy_approx,
            "ratio_measured": self.ratio_measured,
            "k_effective": self.k_effective,
            "n_params": self.n_params,
            "source_bits": self.source_bits,
            "scheme": self.scheme,
            "bit_breakdown": dict(self.bit_breakdown),
            "accuracy_pre_finetune": self.accuracy_pre_finetune,
            "accuracy_post_finetune": self.accuracy_post_finetune,
        }


def build_report(
    em: "EncodedModel",
    counts,
    code: PrefixCode,
    accuracy_pre: float | None = None,
    accuracy_post: float | None = None,
) -> CompressionReport:
    """Assemble the standard report for an encoded model."""
    counts = np.asarray(counts, dtype=np.int64)
    h = entropy_bits(counts)
    avg = code.avg_bits(counts)
    exact = compression_ratio_exact(em.n_params, em.source_bits, counts, code)
    ent = compression_ratio_entropy(
        em.source_bits, avg, code.k, int(sum(code.lengths)), em.n_params
    )
    measured = em.n_params * em.source_bits / em.total_bits
    return CompressionReport(
        entropy_bits=h,
        avg_codeword_bits=avg,
        ratio_exact=exact,
        ratio_entropy_overhead=ent.with_overhead,
        ratio_entropy_approx=ent.approx,
        ratio_measured=measured,
        k_effective=code.k,
        n_params=em.n_params,
        source_bits=em.source_bits,
        scheme=em.scheme,
        bit_breakdown=dict(em.breakdown),
        accuracy_pre_finetune=accuracy_pre,
        accuracy_post_finetune=accuracy_post,
    )


def compression_ratio_entropy(
    source_bits: int, avg_bits: float, k: int, sum_lengths: int, n_params: int
) -> EntropyRatio:
    """Rate-based compression ratio, with and without table overhead.

    The overhead form divides ``b`` by the average codeword length plus the
    per-parameter share of the lookup table; the approximation drops the
    table term (valid when parameters vastly outnumber clusters).
    """
    if n_params <= 0:
        raise ValueError("n_params must be positive")
    overhead = (sum_lengths + k * source_bits) / n_params
    with_overhead = source_bits / (avg_bits + overhead)
    approx = source_bits / avg_bits if avg_bits > 0 else math.inf
    return EntropyRatio(with_overhead, approx)


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------


def _uint_bits(value: int, nbits: int) -> np.ndarray:
    if value < 0 or value >> nbits:
        raise ValueError(f"{value} does not fit in {nbits} bits")
    return np.array(
        [(value >> (nbits - 1 - i)) & 1 for i in range(nbits)], dtype=np.uint8
    )


def _bytes_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def _codeword_payload_bits(codes: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Concatenate one codeword per symbol occurrence, vectorized."""
    if codes.size == 0:
        return np.zeros(0, dtype=np.uint8)
    total = int(lengths.sum())
    owner = np.repeat(np.arange(codes.size), lengths)
    offsets = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    within = np.arange(total) - np.repeat(offsets, lengths)
    shift = lengths[owner] - 1 - within
    return ((codes[owner] >> shift) & 1).astype(np.uint8)


class _BitReader:
    def __init__(self, data: bytes):
        self.bits = _bytes_bits(data)
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        if self.pos + n > self.bits.size:
            raise FormatError("bitstream truncated")
        out = self.bits[self.pos : self.pos + n]
        self.pos += n
        return out

    def read_uint(self, n: int) -> int:
        bits = self.take(n)
        value = 0
        for b in bits:
            value = (value << 1) | int(b)
        return value

    def read_bytes(self, n: int) -> bytes:
        return np.packbits(self.take(8 * n)).tobytes()


def _decode_symbols(reader: _BitReader, code: PrefixCode, n: int) -> np.ndarray:
    table = {
        (len(cw), int(cw, 2)): idx for idx, cw in enumerate(code.codewords)
    }
    max_len = max(code.lengths)
    bits = reader.bits
    pos = reader.pos
    end = bits.size
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        value = 0
        length = 0
        sym = None
        while length < max_len:
            if pos >= end:
                raise FormatError("bitstream truncated inside a codeword")
            value = (value << 1) | int(bits[pos])
            pos += 1
            length += 1
            sym = table.get((length, value))
            if sym is not None:
                break
        if sym is None:
            raise FormatError("invalid codeword in bitstream")
        out[i] = sym
    reader.pos = pos
    return out


# ---------------------------------------------------------------------------
# Index-difference coding for pruned models
# ---------------------------------------------------------------------------


class IndexDiffCode(NamedTuple):
    diffs: np.ndarray
    symbols: np.ndarray
    code: PrefixCode
    total_bits: int


def index_diff_code(positions, total_params: int) -> IndexDiffCode:
    """Huffman-code the gaps between surviving parameter positions.

    The first gap is the first position itself; later gaps are successive
    differences. ``total_bits`` is the exact serialized size of the index
    section (two 32-bit counts, 32+8 bits per distinct gap value, plus the
    gap payload).
    """
    pos = np.ascontiguousarray(positions, dtype=np.int64)
    if pos.ndim != 1 or pos.size < 1:
        raise ValueError("expected a non-empty position list")
    if np.any(np.diff(pos) <= 0):
        raise ValueError("positions must be strictly increasing")
    if pos[0] < 0 or pos[-1] >= total_params:
        raise ValueError("positions out of range")
    diffs = np.diff(pos, prepend=0)
    diffs[0] = pos[0]
    symbols, sym_idx = np.unique(diffs, return_inverse=True)
    counts = np.bincount(sym_idx, minlength=symbols.size)
    code = build_huffman(counts)
    payload_bits = int(np.asarray(code.lengths)[sym_idx].sum())
    total_bits = 64 + symbols.size * 40 + payload_bits
    return IndexDiffCode(diffs, symbols, code, total_bits)


def _index_section_bits(idx: IndexDiffCode) -> np.ndarray:
    parts = [
        _uint_bits(int(idx.diffs.size), 32),
        _uint_bits(int(idx.symbols.size), 32),
    ]
    for s in idx.symbols:
        parts.append(_uint_bits(int(s), 32))
    for l in idx.code.lengths:
        parts.append(_uint_bits(int(l), 8))
    codes = np.array([int(c, 2) for c in idx.code.codewords], dtype=np.int64)
    lengths = np.array(idx.code.lengths, dtype=np.int64)
    _, sym_idx = np.unique(idx.diffs, return_inverse=True)
    parts.append(_codeword_payload_bits(codes[sym_idx], lengths[sym_idx]))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Encoded model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodedModel:
    """A fully serialized quantized model plus its bit accounting.

    ``breakdown`` maps section names to bit counts and sums to
    ``total_bits``; ``table_bits`` (centers + stored codewords + payload)
    is the portion charged by :func:`compression_ratio_exact`.
    """

    data: bytes
    scheme: str
    k: int
    n_params: int
    source_bits: int
    total_params: int
    breakdown: dict

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    @property
    def table_bits(self) -> int:
        return (
            self.breakdown["centers"]
            + self.breakdown["codeword_table"]
            + self.breakdown["payload"]
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.data)


class DecodedModel(NamedTuple):
    assignment: np.ndarray
    codebook: Codebook
    positions: np.ndarray | None
    code: PrefixCode
    source_bits: int
    total_params: int
    breakdown: dict


def encode_assignments(
    assignment,
    codebook: Codebook,
    code: PrefixCode,
    positions=None,
    total_params: int | None = None,
) -> EncodedModel:
    """Pack assignment, codebook, and code into the binary model format.

    Centers are stored at 32-bit float precision; pass a codebook whose
    centers are already float32-representable for an exact round trip.
    ``positions`` (with ``total_params``) adds the pruned-index section.
    """
    a = np.ascontiguousarray(assignment, dtype=np.int64)
    k = codebook.k
    if code.k != k:
        raise ValueError("code does not cover the codebook")
    if a.size and (a.min() < 0 or a.max() >= k):
        raise ValueError("assignment index out of range")
    if np.any(codebook.counts[np.arange(k)] != np.bincount(a, minlength=k)):
        raise ValueError("codebook counts disagree with the assignment")

    source_bits = 32  # centers are stored as float32
    if positions is not None:
        if total_params is None:
            raise ValueError("total_params is required with positions")
        pos = np.ascontiguousarray(positions, dtype=np.int64)
        if pos.size != a.size:
            raise ValueError("positions length disagrees with the assignment")
        idx = index_diff_code(pos, total_params)
    else:
        idx = None
        total_params = a.size if total_params is None else total_params

    header = [
        _bytes_bits(MAGIC),
        _uint_bits(_SCHEMES[code.scheme], 8),
        _uint_bits(1 if idx is not None else 0, 8),
        _uint_bits(source_bits, 8),
        _uint_bits(k, 32),
        _uint_bits(a.size, 32),
        _uint_bits(int(total_params), 32),
    ]
    header_bits = int(sum(part.size for part in header))

    centers32 = codebook.centers.astype("<f4")
    center_bits = _bytes_bits(centers32.tobytes())

    length_bits_parts = [_uint_bits(int(l), 8) for l in code.lengths]
    length_bits = (
        np.concatenate(length_bits_parts) if length_bits_parts else np.zeros(0, np.uint8)
    )

    if max(code.lengths) > 62:
        raise ValueError("codeword longer than 62 bits is not supported")
    codes_int = np.array([int(c, 2) for c in code.codewords], dtype=np.int64)
    lengths_arr = np.array(code.lengths, dtype=np.int64)
    table_bits = _codeword_payload_bits(codes_int, lengths_arr)
    payload_bits = _codeword_payload_bits(codes_int[a], lengths_arr[a])

    sections = header + [center_bits, length_bits, table_bits, payload_bits]
    index_bits_count = 0
    if idx is not None:
        section = _index_section_bits(idx)
        index_bits_count = int(section.size)
        sections.append(section)

    all_bits = np.concatenate(sections)
    data = np.packbits(all_bits).tobytes()
    padding = 8 * len(data) - int(all_bits.size)

    breakdown = {
        "header": header_bits,
        "length_table": int(length_bits.size),
        "centers": int(center_bits.size),
        "codeword_table": int(table_bits.size),
        "payload": int(payload_bits.size),
        "index_section": index_bits_count,
        "padding": padding,
    }
    return EncodedModel(
        data=data,
        scheme=code.scheme,
        k=k,
        n_params=int(a.size),
        source_bits=source_bits,
        total_params=int(total_params),
        breakdown=breakdown,
    )


def decode_assignments(encoded) -> DecodedModel:
    """Exact inverse of :func:`encode_assignments`.

    Accepts an :class:`EncodedModel` or raw bytes. Raises
    :class:`FormatError` on truncation, bad magic, or a corrupt code table.
    """
    data = encoded.data if isinstance(encoded, EncodedModel) else bytes(encoded)
    reader = _BitReader(data)
    if reader.read_bytes(4) != MAGIC:
        raise FormatError("bad magic; not an encoded model")
    scheme_id = reader.read_uint(8)
    if scheme_id not in _SCHEME_NAMES:
        raise FormatError(f"unknown coding scheme id {scheme_id}")
    has_index = reader.read_uint(8)
    source_bits = reader.read_uint(8)
    if source_bits != 32:
        raise FormatError(f"unsupported center precision {source_bits}")
    k = reader.read_uint(32)
    if k == 0:
        raise FormatError("header declares zero clusters")
    n = reader.read_uint(32)
    total_params = reader.read_uint(32)
    header_bits = reader.pos

    centers = np.frombuffer(reader.read_bytes(4 * k), dtype="<f4").astype(np.float64)
    center_end = reader.pos
    lengths = tuple(reader.read_uint(8) for _ in range(k))
    if any(l < 1 for l in lengths):
        raise FormatError("zero-length codeword in table")
    length_end = reader.pos

    try:
        code = PrefixCode(lengths, scheme=_SCHEME_NAMES[scheme_id])
    except ValueError as exc:
        raise FormatError(f"invalid code table: {exc}") from exc
    for cw in code.codewords:
        stored = reader.take(len(cw))
        if any(int(b) != int(c) for b, c in zip(stored, cw)):
            raise FormatError("stored codeword disagrees with canonical code")
    table_end = reader.pos

    assignment = _decode_symbols(reader, code, n)
    payload_end = reader.pos

    positions = None
    index_bits = 0
    if has_index:
        n_positions = reader.read_uint(32)
        n_symbols = reader.read_uint(32)
        if n_positions != n:
            raise FormatError("index section length disagrees with the payload")
        symbols = np.array(
            [reader.read_uint(32) for _ in range(n_symbols)], dtype=np.int64
        )
        sym_lengths = tuple(reader.read_uint(8) for _ in range(n_symbols))
        try:
            sym_code = PrefixCode(sym_lengths, scheme="huffman")
        except ValueError as exc:
            raise FormatError(f"invalid index code table: {exc}") from exc
        gaps = symbols[_decode_symbols(reader, sym_code, n_positions)]
        positions = np.cumsum(gaps)
        index_bits = reader.pos - payload_end

    if reader.bits.size - reader.pos >= 8:
        raise FormatError("trailing data after the encoded model")

    counts = np.bincount(assignment, minlength=k)
    breakdown = {
        "header": header_bits,
        "length_table": length_end - center_end,
        "centers": center_end - header_bits,
        "codeword_table": table_end - length_end,
        "payload": payload_end - table_end,
        "index_section": index_bits,
        "padding": reader.bits.size - reader.pos,
    }
    return DecodedModel(
        assignment=assignment,
        codebook=Codebook(centers, counts),
        positions=positions,
        code=code,
        source_bits=source_bits,
        total_params=total_params,
        breakdown=breakdown,
    )
