"""Bit-packed {-1, +1} vectors and the similarity arithmetic built on them.

Layout: LSB-first inside little-endian uint64 words. Bit ``i`` of the
logical vector lives in word ``i // 64`` at position ``i % 64``; a set bit
encodes +1 and a clear bit encodes -1. Bits at positions ``>= dim`` are
always zero, so XOR of two canonical vectors is zero in the pad region and
popcount needs no masking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rbe import kernels

WORD_BITS = 64


def n_words(dim: int) -> int:
    return (dim + WORD_BITS - 1) // WORD_BITS


def plane_weight(t: int, weighted: bool) -> float:
    """Scale of plane ``t`` in the refined vector: ``2**-t`` or 1."""
    return 0.5**t if weighted else 1.0


def pack_rows(signs: np.ndarray) -> np.ndarray:
    """Pack a ``(rows, dim)`` array of +-1 values into ``(rows, words)`` uint64."""
    signs = np.asarray(signs)
    if signs.ndim != 2 or signs.shape[1] == 0:
        raise ValueError("expected a non-empty 2-D array of signs")
    if not np.all((signs == 1) | (signs == -1)):
        raise ValueError("values must be -1 or +1")
    rows, dim = signs.shape
    words = n_words(dim)
    bits = np.zeros((rows, words * WORD_BITS), dtype=np.uint8)
    bits[:, :dim] = signs > 0
    packed = np.packbits(bits.reshape(rows, words, 8, 8), axis=-1, bitorder="little")
    return np.ascontiguousarray(packed.reshape(rows, words * 8).view("<u8")).astype(np.uint64)


def unpack_rows(words: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of :func:`pack_rows`; returns int8 +-1 values."""
    words = np.ascontiguousarray(words, dtype=np.uint64)
    rows = words.shape[0]
    as_bytes = words.astype("<u8").view(np.uint8).reshape(rows, -1)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :dim]
    return bits.astype(np.int8) * 2 - 1


@dataclass(frozen=True, eq=False)
class PackedBinaryVector:
    """One ingredient plane: ``dim`` signs packed into 64-bit words."""

    dim: int
    words: np.ndarray

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if words.shape != (n_words(self.dim),):
            raise ValueError(f"expected {n_words(self.dim)} words for dim {self.dim}")
        tail = self.dim % WORD_BITS
        if tail and int(words[-1]) >> tail:
            raise ValueError("pad bits must be zero")
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    def __eq__(self, other):
        if not isinstance(other, PackedBinaryVector):
            return NotImplemented
        return self.dim == other.dim and bool(np.array_equal(self.words, other.words))

    def __hash__(self):
        return hash((self.dim, self.words.tobytes()))

    def unpack(self) -> np.ndarray:
        return unpack_rows(self.words[None, :], self.dim)[0]

    def __len__(self):
        return self.dim


def pack(values: Sequence[int]) -> PackedBinaryVector:
    """Pack a sequence of -1/+1 into a :class:`PackedBinaryVector`."""
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("cannot pack an empty vector")
    return PackedBinaryVector(arr.size, pack_rows(arr[None, :])[0])


def unpack(vec: PackedBinaryVector) -> np.ndarray:
    return vec.unpack()


def binary_dot(x: PackedBinaryVector, y: PackedBinaryVector) -> int:
    """Dot product of two +-1 vectors via ``n - 2 * popcount(x XOR y)``."""
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} != {y.dim}")
    diff = sum(int(a ^ b).bit_count() for a, b in zip(x.words.tolist(), y.words.tolist()))
    return x.dim - 2 * diff


def refined_from_signs(planes: np.ndarray, weighted: bool) -> np.ndarray:
    """Weighted sum over the leading plane axis of a ``(planes, ..., dim)`` array."""
    planes = np.asarray(planes, dtype=np.float64)
    scales = np.array([plane_weight(t, weighted) for t in range(planes.shape[0])])
    return np.tensordot(scales, planes, axes=1)


@dataclass(frozen=True, eq=False)
class RbeEmbedding:
    """Base plane plus residual planes, with the refined vector's norm."""

    planes: tuple[PackedBinaryVector, ...]
    magnitude: float = field(default=float("nan"))

    def __post_init__(self):
        planes = tuple(self.planes)
        if not planes:
            raise ValueError("an embedding needs at least one plane")
        dims = {p.dim for p in planes}
        if len(dims) != 1:
            raise ValueError("all planes must share dim")
        if self.magnitude < 0:
            raise ValueError("magnitude must be nonnegative")
        object.__setattr__(self, "planes", planes)

    @classmethod
    def from_planes(cls, planes: Sequence[PackedBinaryVector], weighted: bool = True) -> RbeEmbedding:
        """Build an embedding and compute its magnitude from the planes."""
        tmp = cls(tuple(planes), 0.0)
        return cls(tmp.planes, float(np.linalg.norm(refined_vector(tmp, weighted))))

    @classmethod
    def from_signs(cls, signs: np.ndarray, weighted: bool = True) -> RbeEmbedding:
        """``signs`` has shape ``(planes, dim)`` with +-1 entries."""
        signs = np.asarray(signs)
        words = pack_rows(signs)
        return cls.from_planes([PackedBinaryVector(signs.shape[1], w) for w in words], weighted)

    @property
    def dim(self) -> int:
        return self.planes[0].dim

    @property
    def n_planes(self) -> int:
        return len(self.planes)

    def word_matrix(self) -> np.ndarray:
        """``(planes, words)`` uint64 array, the layout the scan kernels take."""
        return np.stack([p.words for p in self.planes])

    def signs(self) -> np.ndarray:
        return unpack_rows(self.word_matrix(), self.dim)

    def __eq__(self, other):
        if not isinstance(other, RbeEmbedding):
            return NotImplemented
        return self.planes == other.planes and self.magnitude == other.magnitude

    def __hash__(self):
        return hash((self.planes, self.magnitude))


@dataclass(frozen=True)
class SimilarityConfig:
    query_planes: int = 1
    keyword_planes: int = 1
    use_residual_weights: bool = True
    normalize_query: bool = True

    def __post_init__(self):
        if self.query_planes < 1 or self.keyword_planes < 1:
            raise ValueError("plane counts must be at least 1")


def refined_vector(e: RbeEmbedding, use_residual_weights: bool = True) -> np.ndarray:
    """Float reconstruction: plane ``t`` contributes with scale ``2**-t`` (or 1)."""
    return refined_from_signs(e.signs(), use_residual_weights)


def combine_levels(levels: Sequence[int], weighted: bool) -> float:
    """Fold per-level dot sums into the weighted total.

    ``levels[s]`` is the sum of plane dot products whose weights multiply to
    ``2**-s``. The weighted fold runs from the deepest level up, halving the
    running value once per level, so there are exactly ``len(levels) - 1``
    halvings and every intermediate is an exact binary fraction.
    """
    if not weighted:
        return float(sum(levels))
    acc = float(levels[-1])
    for s in range(len(levels) - 2, -1, -1):
        acc = float(levels[s]) + acc * 0.5
    return acc


def rbe_dot(q: RbeEmbedding, k: RbeEmbedding, use_residual_weights: bool = True) -> float:
    """Dot product of two refined vectors computed from binary plane dots."""
    if q.dim != k.dim:
        raise ValueError(f"dimension mismatch: {q.dim} != {k.dim}")
    levels = [0] * (q.n_planes + k.n_planes - 1)
    for j, qp in enumerate(q.planes):
        for i, kp in enumerate(k.planes):
            levels[j + i] += binary_dot(qp, kp)
    return combine_levels(levels, use_residual_weights)


def rbe_score(q: RbeEmbedding, k: RbeEmbedding, cfg: SimilarityConfig) -> float:
    """Cosine of the refined vectors, or cosine times the query norm.

    With ``cfg.normalize_query`` off the query magnitude is left out; it is
    constant for a query, so rankings are unchanged.
    """
    if q.n_planes != cfg.query_planes or k.n_planes != cfg.keyword_planes:
        raise ValueError(
            f"plane counts ({q.n_planes}, {k.n_planes}) do not match config "
            f"({cfg.query_planes}, {cfg.keyword_planes})"
        )
    if not k.magnitude > 0:
        raise ValueError("keyword magnitude must be positive")
    score = rbe_dot(q, k, cfg.use_residual_weights) / float(np.float64(k.magnitude))
    if cfg.normalize_query:
        if not q.magnitude > 0:
            raise ValueError("query magnitude must be positive")
        score /= q.magnitude
    return score


def distinct_levels(n_planes: int, weighted: bool) -> list[float]:
    """All per-dimension values a refined vector can take with ``n_planes`` planes."""
    values = {0.0}
    for t in range(n_planes):
        w = plane_weight(t, weighted)
        values = {v + s * w for v in values for s in (-1.0, 1.0)}
    return sorted(values)


def magnitude_of(signs: np.ndarray, weighted: bool) -> np.ndarray:
    """Norms of refined vectors for a ``(planes, rows, dim)`` sign array."""
    refined = refined_from_signs(signs, weighted)
    return np.sqrt(np.einsum("...d,...d->...", refined, refined))


def batch_dot(a: np.ndarray, b: np.ndarray, dim: int) -> np.ndarray:
    """Row-wise binary dots of two ``(rows, words)`` uint64 arrays."""
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return kernels.dot_rows(a, b, dim)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    return float(np.dot(a, b)) / (na * nb)
