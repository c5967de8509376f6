"""Pure numpy versions of the scan kernels.

Same signatures and checks as the compiled module. Scores are exact integer
level sums scaled once, so both backends agree bit for bit.
"""

from __future__ import annotations

import numpy as np


MAX_LEVELS = 24
MAX_DIM = 1 << 22


def _check_shapes(query_planes, key_planes, magnitudes, dim):
    if query_planes.shape[0] + key_planes.shape[0] - 1 > MAX_LEVELS:
        raise ValueError(f"at most {MAX_LEVELS} score levels supported")
    if query_planes.shape[1] != key_planes.shape[2]:
        raise ValueError("query and key word counts differ")
    if magnitudes.shape[0] != key_planes.shape[1]:
        raise ValueError("one magnitude per key required")
    if dim < 1 or dim > MAX_DIM or dim > 64 * key_planes.shape[2]:
        raise ValueError("dim out of range for the packed planes")


def scan_scores(query_planes, key_planes, magnitudes, dim, weighted, out=None):
    """Level ``j+i`` carries weight ``2^-(j+i)``; scaled by ``2^top`` the sum is an exact integer."""
    _check_shapes(query_planes, key_planes, magnitudes, dim)
    uq = query_planes.shape[0]
    vk = key_planes.shape[0]
    top = uq + vk - 2
    acc = np.zeros(key_planes.shape[1], dtype=np.int64)
    for j in range(uq):
        for i in range(vk):
            dot = dim - 2 * np.bitwise_count(key_planes[i] ^ query_planes[j]).sum(axis=1, dtype=np.int64)
            acc += (dot << (top - j - i)) if weighted else dot
    scale = np.ldexp(1.0, -top) if weighted else 1.0
    count = key_planes.shape[1]
    if out is None:
        out = np.empty(count, dtype=np.float64)
    elif out.shape != (count,) or out.dtype != np.float64:
        raise ValueError("out must be a float64 array with one slot per key")
    np.multiply(acc, scale, out=out, casting="unsafe")
    np.divide(out, magnitudes.astype(np.float64), out=out)
    return out


def thread_of(count, threads_per_block, items_per_thread):
    z = np.arange(count, dtype=np.int64)
    span = threads_per_block * items_per_thread
    return (z // span) * threads_per_block + z % threads_per_block


def scan_select(
    query_planes,
    key_planes,
    magnitudes,
    ids,
    dim,
    weighted,
    threads_per_block,
    items_per_thread,
    queue_length,
    n_threads,
):
    _check_shapes(query_planes, key_planes, magnitudes, dim)
    count = key_planes.shape[1]
    if ids.shape[0] != count:
        raise ValueError("one id per key required")
    if threads_per_block < 1 or items_per_thread < 1 or queue_length < 1:
        raise ValueError("geometry sizes must be positive")
    span = threads_per_block * items_per_thread
    if count and (count - 1) // span * threads_per_block + min(threads_per_block, count - (count - 1) // span * span) > n_threads:
        raise ValueError("geometry has too few threads for the partition")
    scores = scan_scores(query_planes, key_planes, magnitudes, dim, weighted)
    thread = thread_of(count, threads_per_block, items_per_thread)
    order = np.lexsort((ids, -scores, thread))
    sorted_thread = thread[order]
    # rank of each entry inside its thread group
    starts = np.searchsorted(sorted_thread, sorted_thread, side="left")
    rank = np.arange(count) - starts
    keep = rank < queue_length
    out_scores = np.full((n_threads, queue_length), -np.inf, dtype=np.float64)
    out_index = np.full((n_threads, queue_length), -1, dtype=np.int64)
    kept = order[keep]
    out_scores[sorted_thread[keep], rank[keep]] = scores[kept]
    out_index[sorted_thread[keep], rank[keep]] = kept
    return out_scores, out_index, count


def dot_rows(a, b, dim):
    if a.shape != b.shape:
        raise ValueError("row blocks differ in shape")
    return dim - 2 * np.bitwise_count(a ^ b).sum(axis=1, dtype=np.int64)


def float_scan(corpus, query, out=None):
    """Float32 dot-product scan (BLAS), the full-precision baseline."""
    if out is not None:
        return np.dot(corpus, query, out=out)
    return corpus @ query
