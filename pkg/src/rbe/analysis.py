"""Miss probability of length-1 per-thread priority queues.

``C`` candidates are split into ``T = C / I`` threads of ``I`` items. The
``N`` relevant items land uniformly at random; a thread keeps only its best
item, so a thread holding ``n > 1`` relevant items loses ``n - 1`` of them.
``M`` is the number of threads with at least one relevant item and
``L = N - M`` the number missed.

All probabilities are computed with exact integer binomials and a single
final rational-to-float conversion, so there is no cancellation even at
``C = 1e9``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

MAX_EXACT_MISSES = 64


@dataclass(frozen=True)
class MissModel:
    candidates: int
    relevant: int
    items_per_thread: int

    def __post_init__(self):
        if self.candidates < 1 or self.relevant < 1 or self.items_per_thread < 1:
            raise ValueError("C, N and I must be positive")
        if self.candidates % self.items_per_thread:
            raise ValueError(
                f"C={self.candidates} is not divisible by I={self.items_per_thread}"
            )
        if self.relevant > self.candidates:
            raise ValueError("N cannot exceed C")

    @property
    def threads(self) -> int:
        return self.candidates // self.items_per_thread

    @property
    def min_threads_hit(self) -> int:
        return -(-self.relevant // self.items_per_thread)

    @property
    def max_threads_hit(self) -> int:
        return min(self.relevant, self.threads)


def _partitions(total: int, max_parts: int, max_part: int) -> Iterator[tuple[int, ...]]:
    """Integer partitions of ``total`` (non-increasing parts, bounded)."""
    if total == 0:
        yield ()
        return
    if max_parts == 0:
        return
    for first in range(min(total, max_part), 0, -1):
        for rest in _partitions(total - first, max_parts - 1, first):
            yield (first,) + rest


def composition_count(M: int, excess: tuple[int, ...]) -> int:
    """Ordered placements of the nonzero ``excess`` parts among ``M`` threads."""
    k = len(excess)
    ways = math.perm(M, k)
    for mult in Counter(excess).values():
        ways //= math.factorial(mult)
    return ways


def thread_fill_sum(N: int, M: int, I: int) -> int:
    """Sum over compositions ``n_1 + ... + n_M = N`` (``n_j >= 1``) of ``prod C(I, n_j)``.

    Each composition is ``n_j = 1 + e_j``; grouping compositions by the
    multiset of nonzero ``e_j`` turns the stars-and-bars enumeration into a
    walk over partitions of ``L = N - M``.
    """
    L = N - M
    total = 0
    for excess in _partitions(L, M, I - 1):
        term = composition_count(M, excess) * I ** (M - len(excess))
        for e in excess:
            term *= math.comb(I, e + 1)
        total += term
    return total


def _check_M(model: MissModel, M: int) -> None:
    if not 1 <= M <= model.max_threads_hit:
        raise ValueError(f"M={M} outside [1, {model.max_threads_hit}]")
    if model.relevant - M > MAX_EXACT_MISSES:
        raise ValueError(f"L={model.relevant - M} exceeds the exact enumeration limit")


@lru_cache(maxsize=64)
def _placements(C: int, N: int) -> int:
    return math.comb(C, N)


def exact_p_m_fraction(C: int, N: int, I: int, M: int) -> Fraction:
    """``P(M)`` as an exact rational."""
    model = MissModel(C, N, I)
    _check_M(model, M)
    favourable = math.comb(model.threads, M) * thread_fill_sum(N, M, I)
    return Fraction(favourable, _placements(C, N))


def exact_p_m(C: int, N: int, I: int, M: int) -> float:
    """Probability that exactly ``M`` threads hold at least one relevant item."""
    return float(exact_p_m_fraction(C, N, I, M))


def closed_form_p_l(C: int, N: int, I: int, L: int) -> Fraction:
    """Hand-derived closed forms for ``L`` in {0, 1, 2}; used to cross-check."""
    model = MissModel(C, N, I)
    T = model.threads
    den = _placements(C, N)
    if L == 0:
        num = math.comb(T, N) * I**N
    elif L == 1:
        num = math.comb(T, N - 1) * (N - 1) * math.comb(I, 2) * I ** (N - 2)
    elif L == 2:
        three_in_one = (N - 2) * math.comb(I, 3) * I ** (N - 3) if N >= 3 else 0
        two_pairs = math.comb(N - 2, 2) * math.comb(I, 2) ** 2 * I ** (N - 4) if N >= 4 else 0
        num = math.comb(T, N - 2) * (three_in_one + two_pairs)
    else:
        raise ValueError("closed forms exist for L <= 2 only")
    return Fraction(num, den)


def p_l_at_most(C: int, N: int, I: int, l: int) -> float:
    """``P(L <= l)``, summing the exact distribution over ``L = 0..l``."""
    if l < 0:
        raise ValueError("l must be nonnegative")
    model = MissModel(C, N, I)
    total = Fraction(0)
    for L in range(l + 1):
        M = N - L
        if M < model.min_threads_hit:
            break
        if M > model.max_threads_hit:
            continue
        total += exact_p_m_fraction(C, N, I, M)
    return float(total)


def miss_distribution(C: int, N: int, I: int, max_l: int) -> dict[int, float]:
    """``{L: P(L)}`` for ``L = 0..max_l`` (zero where infeasible)."""
    model = MissModel(C, N, I)
    out = {}
    for L in range(max_l + 1):
        M = N - L
        if model.min_threads_hit <= M <= model.max_threads_hit:
            out[L] = exact_p_m(C, N, I, M)
        else:
            out[L] = 0.0
    return out


@dataclass(frozen=True)
class RecallPrediction:
    recall: float
    truncated_recall: float
    truncation_bound: float


def _miss_free_fraction(C: int, N: int, size: int) -> Fraction:
    """``P(a given thread of this size holds no relevant item)``."""
    return Fraction(math.comb(C - size, N), _placements(C, N))


def expected_recall_for_threads(thread_sizes: Sequence[int], N: int) -> float:
    """Expected ``M / N`` for arbitrary thread sizes.

    By linearity ``E[M] = sum_j P(thread j is hit)``, which is exact and
    handles partially filled tail threads.
    """
    return _recall_from_sizes(Counter(int(s) for s in thread_sizes if s > 0), N)


def _recall_from_sizes(sizes: dict[int, int], N: int) -> float:
    C = sum(s * c for s, c in sizes.items())
    if N < 1 or N > C:
        raise ValueError("need 1 <= N <= number of candidates")
    hit = Fraction(0)
    for size, count in sizes.items():
        hit += count * (1 - _miss_free_fraction(C, N, size))
    return float(hit / N)


def expected_recall(C: int, N: int, I: int) -> RecallPrediction:
    """Expected recall@N of the lossy selection.

    ``recall`` is exact, by linearity of expectation. ``truncated_recall``
    sums ``(N - L) / N * P(L)`` over ``L <= 2`` only, so it is a lower
    bound; the true value lies within ``truncation_bound = 1 - P(L <= 2)``
    above it.
    """
    model = MissModel(C, N, I)
    recall = _recall_from_sizes({I: model.threads}, N)
    dist = miss_distribution(C, N, I, min(2, N - 1))
    partial = sum((N - L) / N * p for L, p in dist.items())
    bound = max(0.0, 1.0 - sum(dist.values()))
    return RecallPrediction(recall, partial, bound)


def count_missed(thread_ids: np.ndarray, queue_length: int = 1) -> int:
    """Relevant items lost when each thread keeps only ``queue_length`` of them."""
    _, counts = np.unique(np.asarray(thread_ids), return_counts=True)
    return int(np.maximum(counts - queue_length, 0).sum())


def simulate_miss(
    C: int,
    N: int,
    I: int,
    queue_length: int = 1,
    trials: int = 10_000,
    seed: int = 0,
    chunk: int = 20_000,
) -> dict[int, float]:
    """Empirical distribution of the miss count ``L``.

    Each trial draws ``N`` distinct slots uniformly out of ``C`` and assigns
    slot ``z`` to thread ``z // I``.
    """
    if N > C:
        raise ValueError("N cannot exceed C")
    if queue_length < 1:
        raise ValueError("queue_length must be at least 1")
    if C % I:
        raise ValueError(f"C={C} is not divisible by I={I}")
    rng = np.random.default_rng(seed)
    tally: Counter[int] = Counter()
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        positions = _distinct_positions(rng, C, N, size)
        threads = np.sort(positions // I, axis=1)
        tally.update(_missed_per_row(threads, queue_length).tolist())
        done += size
    return {L: tally[L] / trials for L in sorted(tally)}


def _distinct_positions(rng: np.random.Generator, C: int, N: int, rows: int) -> np.ndarray:
    if 2 * N > C:
        return np.stack([rng.permutation(C)[:N] for _ in range(rows)])
    out = rng.integers(0, C, size=(rows, N))
    while True:
        srt = np.sort(out, axis=1)
        bad = np.any(srt[:, 1:] == srt[:, :-1], axis=1)
        if not bad.any():
            return out
        out[bad] = rng.integers(0, C, size=(int(bad.sum()), N))


def _missed_per_row(sorted_threads: np.ndarray, queue_length: int) -> np.ndarray:
    rows, N = sorted_threads.shape
    # run-length position of each entry inside its run of equal thread ids
    new_run = np.ones_like(sorted_threads, dtype=bool)
    new_run[:, 1:] = sorted_threads[:, 1:] != sorted_threads[:, :-1]
    idx = np.broadcast_to(np.arange(N), (rows, N))
    run_start = np.maximum.accumulate(np.where(new_run, idx, 0), axis=1)
    offset = idx - run_start
    return (offset >= queue_length).sum(axis=1)


def table(C: int = 10**9, N: int = 1000, I: int = 256, max_l: int = 2) -> list[tuple[int, float]]:
    """Rows ``(l, P(L <= l))`` in percent."""
    model = MissModel(C, N, I)
    rows = []
    running = Fraction(0)
    for l in range(max_l + 1):
        M = N - l
        if model.min_threads_hit <= M <= model.max_threads_hit:
            running += exact_p_m_fraction(C, N, I, M)
        rows.append((l, float(running) * 100.0))
    return rows
