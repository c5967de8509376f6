"""Scan throughput: packed binary scoring against a float32 dot-product scan.

Both scans produce one score per keyword into a preallocated buffer, so the
timings compare the scoring loops rather than allocation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from rbe import kernels
from rbe.binvec import n_words


@dataclass
class Timing:
    mode: str
    backend: str
    keywords: int
    seconds: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.seconds))

    @property
    def std(self) -> float:
        return float(np.std(self.seconds, ddof=1)) if len(self.seconds) > 1 else 0.0

    @property
    def throughput(self) -> float:
        return self.keywords / self.mean


def random_planes(rng: np.random.Generator, n_planes: int, count: int, dim: int) -> np.ndarray:
    words = n_words(dim)
    planes = rng.integers(0, np.iinfo(np.uint64).max, size=(n_planes, count, words), dtype=np.uint64, endpoint=True)
    if dim % 64:
        planes[:, :, -1] &= np.uint64((1 << (dim % 64)) - 1)
    return planes


def random_float_corpus(rng: np.random.Generator, count: int, dim: int, chunk: int = 1 << 20) -> np.ndarray:
    """Float32 corpus filled in chunks so no float64 temporary of full size exists."""
    corpus = np.empty((count, dim), dtype=np.float32)
    for start in range(0, count, chunk):
        rng.standard_normal(out=corpus[start : start + chunk], dtype=np.float32)
    return corpus


def _timed(fn, repeats: int, warmup: int = 1) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def time_binary(
    planes: np.ndarray,
    magnitudes: np.ndarray,
    query: np.ndarray,
    dim: int,
    weighted: bool = True,
    repeats: int = 5,
    backend: str | None = None,
) -> Timing:
    k = kernels.get_backend(backend)
    name = backend or kernels.BACKEND
    out = np.empty(planes.shape[1], dtype=np.float64)
    secs = _timed(lambda: k.scan_scores(query, planes, magnitudes, dim, weighted, out), repeats)
    return Timing("binary", name, planes.shape[1], secs)


def time_float(corpus: np.ndarray, query: np.ndarray, repeats: int = 5) -> Timing:
    out = np.empty(corpus.shape[0], dtype=np.float32)
    secs = _timed(lambda: kernels.float_scan(corpus, query, out), repeats)
    return Timing("float", "blas", corpus.shape[0], secs)


def speedup(binary: Timing, floating: Timing) -> tuple[float, float]:
    """Mean and stddev of the per-repeat float/binary time ratio."""
    ratios = np.asarray(floating.seconds) / np.asarray(binary.seconds)
    return float(ratios.mean()), float(ratios.std(ddof=1)) if len(ratios) > 1 else 0.0
