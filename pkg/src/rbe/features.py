"""Hashed tri-letter-gram features."""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np
import scipy.sparse as sp

DEFAULT_HASH_DIM = 2**15


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def trigrams(text: str) -> list[str]:
    """Character trigrams of each ``#word#``-wrapped token."""
    norm = normalize(text)
    if not norm:
        raise ValueError("text is empty after normalization")
    grams = []
    for token in norm.split(" "):
        wrapped = f"#{token}#"
        grams.extend(wrapped[i : i + 3] for i in range(len(wrapped) - 2))
    return grams


@lru_cache(maxsize=1 << 16)
def _hashed(hash_dim: int, text: str) -> tuple[np.ndarray, np.ndarray]:
    counts = Counter(zlib.crc32(g.encode("utf-8")) % hash_dim for g in trigrams(text))
    idx = np.array(sorted(counts), dtype=np.int64)
    val = np.array([counts[i] for i in idx.tolist()], dtype=np.float64)
    idx.flags.writeable = False
    val.flags.writeable = False
    return idx, val


@dataclass(frozen=True)
class Featurizer:
    hash_dim: int = DEFAULT_HASH_DIM

    def __post_init__(self):
        if self.hash_dim < 1:
            raise ValueError("hash_dim must be positive")

    def index(self, gram: str) -> int:
        return zlib.crc32(gram.encode("utf-8")) % self.hash_dim

    def featurize(self, text: str) -> dict[int, int]:
        """Sparse count vector as ``{index: count}``."""
        idx, val = _hashed(self.hash_dim, text)
        return dict(zip(idx.tolist(), val.astype(int).tolist()))

    def batch(self, texts: Iterable[str]) -> sp.csr_matrix:
        """Stack featurized texts into a ``(rows, hash_dim)`` CSR matrix."""
        rows = [_hashed(self.hash_dim, text) for text in texts]
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum([len(r[0]) for r in rows], out=indptr[1:])
        if rows:
            indices = np.concatenate([r[0] for r in rows])
            data = np.concatenate([r[1] for r in rows])
        else:
            indices = np.zeros(0, dtype=np.int64)
            data = np.zeros(0)
        return sp.csr_matrix((data, indices, indptr), shape=(len(rows), self.hash_dim))
