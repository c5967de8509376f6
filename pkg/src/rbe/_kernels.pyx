# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scan kernels.

Mirrors ``rbe._fallback``: same signatures and bit-identical scores. Level
``j+i`` of a score carries weight ``2^-(j+i)``; scaled by ``2^top`` every
term is an integer, so keys are scored with integer arithmetic and one final
multiply and divide.

Keys are processed in chunks of ``CHUNK`` items, one (query plane, key
plane) pair at a time, so the inner loop is a flat popcount over contiguous
words that the compiler can vectorize.
"""

import numpy as np

from libc.stdint cimport int64_t, uint64_t
from libc.math cimport ldexp

DEF CHUNK = 512
DEF MAX_LEVELS = 24
DEF MAX_DIM = 1 << 22


cdef extern from *:
    """
    static inline int rbe_popcount64(unsigned long long x) {
        return __builtin_popcountll(x);
    }
    """
    int rbe_popcount64(unsigned long long x) nogil


cdef void _score_chunk(
    const uint64_t* q,
    Py_ssize_t uq,
    const uint64_t* k,
    Py_ssize_t vk,
    Py_ssize_t count,
    Py_ssize_t nw,
    Py_ssize_t c0,
    Py_ssize_t n,
    int64_t dim,
    bint weighted,
    double scale,
    const float* mags,
    int64_t* acc,
    double* out,
) noexcept nogil:
    # scores of items c0 .. c0+n-1; planes of k are count*nw words apart
    cdef Py_ssize_t top = uq + vk - 2
    cdef Py_ssize_t j, i, z, w
    cdef int sh
    cdef int64_t diff
    cdef uint64_t qw
    cdef const uint64_t* kk
    cdef const uint64_t* qj
    for z in range(n):
        acc[z] = 0
    for i in range(vk):
        kk = k + i * count * nw + c0 * nw
        for j in range(uq):
            sh = <int>(top - j - i) if weighted else 0
            if nw == 1:
                qw = q[j]
                for z in range(n):
                    acc[z] += (dim - 2 * <int64_t>rbe_popcount64(qw ^ kk[z])) << sh
            else:
                qj = q + j * nw
                for z in range(n):
                    diff = 0
                    for w in range(nw):
                        diff += rbe_popcount64(qj[w] ^ kk[z * nw + w])
                    acc[z] += (dim - 2 * diff) << sh
    for z in range(n):
        out[z] = <double>acc[z] * scale / <double>mags[c0 + z]


cdef double _scale(Py_ssize_t top, bint weighted):
    return ldexp(1.0, -top) if weighted else 1.0


cdef _check_shapes(query_planes, key_planes, magnitudes, int64_t dim):
    if query_planes.shape[0] + key_planes.shape[0] - 1 > MAX_LEVELS:
        raise ValueError(f"at most {MAX_LEVELS} score levels supported")
    if query_planes.shape[1] != key_planes.shape[2]:
        raise ValueError("query and key word counts differ")
    if magnitudes.shape[0] != key_planes.shape[1]:
        raise ValueError("one magnitude per key required")
    if dim < 1 or dim > MAX_DIM or dim > 64 * key_planes.shape[2]:
        raise ValueError("dim out of range for the packed planes")


def scan_scores(
    const uint64_t[:, ::1] query_planes,
    const uint64_t[:, :, ::1] key_planes,
    const float[::1] magnitudes,
    int64_t dim,
    bint weighted,
    out=None,
):
    """Score every key: weighted level sum over the key magnitude."""
    _check_shapes(query_planes, key_planes, magnitudes, dim)
    cdef Py_ssize_t count = key_planes.shape[1]
    cdef Py_ssize_t nw = key_planes.shape[2]
    cdef Py_ssize_t uq = query_planes.shape[0]
    cdef Py_ssize_t vk = key_planes.shape[0]
    cdef double scale = _scale(uq + vk - 2, weighted)
    cdef Py_ssize_t c0, n
    cdef int64_t acc[CHUNK]
    if out is None:
        out = np.empty(count, dtype=np.float64)
    elif out.shape != (count,) or out.dtype != np.float64:
        raise ValueError("out must be a float64 array with one slot per key")
    if count == 0:
        return out
    cdef double[::1] view = out
    cdef const uint64_t* q = &query_planes[0, 0]
    cdef const uint64_t* k = &key_planes[0, 0, 0]
    with nogil:
        c0 = 0
        while c0 < count:
            n = min(<Py_ssize_t>CHUNK, count - c0)
            _score_chunk(q, uq, k, vk, count, nw, c0, n, dim, weighted, scale, &magnitudes[0], acc, &view[c0])
            c0 += n
    return out


def scan_select(
    const uint64_t[:, ::1] query_planes,
    const uint64_t[:, :, ::1] key_planes,
    const float[::1] magnitudes,
    const int64_t[::1] ids,
    int64_t dim,
    bint weighted,
    Py_ssize_t threads_per_block,
    Py_ssize_t items_per_thread,
    Py_ssize_t queue_length,
    Py_ssize_t n_threads,
):
    """Scan keys in index order; each simulated thread keeps its best ``queue_length``.

    Returns ``(scores, index, scored)`` where row ``t`` holds thread ``t``'s
    queue best-first under (score desc, id asc); empty slots are
    ``(-inf, -1)``.
    """
    _check_shapes(query_planes, key_planes, magnitudes, dim)
    cdef Py_ssize_t count = key_planes.shape[1]
    cdef Py_ssize_t nw = key_planes.shape[2]
    cdef Py_ssize_t uq = query_planes.shape[0]
    cdef Py_ssize_t vk = key_planes.shape[0]
    cdef Py_ssize_t span = threads_per_block * items_per_thread
    cdef double scale = _scale(uq + vk - 2, weighted)
    cdef Py_ssize_t z, t, slot, pos, c0, n, last
    cdef double s
    cdef int64_t kid
    cdef int64_t acc[CHUNK]
    cdef double buf[CHUNK]
    if ids.shape[0] != count:
        raise ValueError("one id per key required")
    if threads_per_block < 1 or items_per_thread < 1 or queue_length < 1:
        raise ValueError("geometry sizes must be positive")
    if count:
        last = (count - 1) // span
        if last * threads_per_block + min(threads_per_block, count - last * span) > n_threads:
            raise ValueError("geometry has too few threads for the partition")
    scores = np.full((n_threads, queue_length), -np.inf, dtype=np.float64)
    index = np.full((n_threads, queue_length), -1, dtype=np.int64)
    if count == 0:
        return scores, index, 0
    cdef double[:, ::1] qs = scores
    cdef int64_t[:, ::1] qi = index
    cdef const uint64_t* q = &query_planes[0, 0]
    cdef const uint64_t* k = &key_planes[0, 0, 0]
    with nogil:
        c0 = 0
        while c0 < count:
            n = min(<Py_ssize_t>CHUNK, count - c0)
            _score_chunk(q, uq, k, vk, count, nw, c0, n, dim, weighted, scale, &magnitudes[0], acc, buf)
            for z in range(c0, c0 + n):
                s = buf[z - c0]
                kid = ids[z]
                t = (z // span) * threads_per_block + z % threads_per_block
                # the queue is sorted best-first; find the insertion slot
                pos = queue_length
                slot = queue_length - 1
                while slot >= 0:
                    if qi[t, slot] < 0 or s > qs[t, slot] or (
                        s == qs[t, slot] and kid < ids[qi[t, slot]]
                    ):
                        pos = slot
                        slot -= 1
                    else:
                        break
                if pos == queue_length:
                    continue
                slot = queue_length - 1
                while slot > pos:
                    qs[t, slot] = qs[t, slot - 1]
                    qi[t, slot] = qi[t, slot - 1]
                    slot -= 1
                qs[t, pos] = s
                qi[t, pos] = z
            c0 += n
    return scores, index, count


def dot_rows(const uint64_t[:, ::1] a, const uint64_t[:, ::1] b, int64_t dim):
    """Row-wise ``dim - 2 * popcount(a ^ b)``."""
    if a.shape[0] != b.shape[0] or a.shape[1] != b.shape[1]:
        raise ValueError("row blocks differ in shape")
    cdef Py_ssize_t rows = a.shape[0]
    cdef Py_ssize_t nw = a.shape[1]
    cdef Py_ssize_t r, w
    cdef int64_t diff
    out = np.empty(rows, dtype=np.int64)
    if rows == 0:
        return out
    cdef int64_t[::1] view = out
    with nogil:
        for r in range(rows):
            diff = 0
            for w in range(nw):
                diff += rbe_popcount64(a[r, w] ^ b[r, w])
            view[r] = dim - 2 * diff
    return out
