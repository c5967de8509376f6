"""Plane-separated keyword index and exhaustive k-NN selection.

A partition holds its keywords as one contiguous ``(count, words)`` block per
plane (all base planes, then all first residuals, ...), a float32 magnitude
per keyword and int64 external ids.

Search follows the GPU kernel layout: thread ``y`` of block ``x`` scores the
items ``z = x*T_b*I + y + i*T_b`` for ``i < I`` and keeps its best
``queue_length`` candidates; the survivors of a partition are sorted and cut
to ``N`` (global selection), and partitions are merged the same way.
Ordering everywhere is score descending, then id ascending.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from rbe import kernels
from rbe.binvec import RbeEmbedding, n_words, plane_weight

INDEX_MAGIC = b"RBEI"
INDEX_VERSION = 1
EMBEDDINGS_MAGIC = b"RBEE"
EMBEDDINGS_VERSION = 1

_INDEX_HEADER = struct.Struct("<4sIIIBI")
_EMB_HEADER = struct.Struct("<4sIIIBQ")


@dataclass(frozen=True)
class ScanGeometry:
    """``blocks`` x ``threads_per_block`` threads, ``items_per_thread`` items each.

    ``blocks=None`` sizes the grid per partition to just cover it.
    """

    threads_per_block: int = 256
    items_per_thread: int = 256
    queue_length: int = 1
    blocks: int | None = None

    def __post_init__(self):
        if self.threads_per_block < 1 or self.items_per_thread < 1 or self.queue_length < 1:
            raise ValueError("geometry sizes must be positive")
        if self.blocks is not None and self.blocks < 1:
            raise ValueError("blocks must be positive")

    @property
    def span(self) -> int:
        return self.threads_per_block * self.items_per_thread

    def blocks_for(self, count: int) -> int:
        needed = max(1, -(-count // self.span))
        if self.blocks is None:
            return needed
        if self.blocks < needed:
            raise ValueError(
                f"{self.blocks} blocks x {self.threads_per_block} threads x "
                f"{self.items_per_thread} items cannot cover {count} keywords"
            )
        return self.blocks

    def n_threads(self, count: int) -> int:
        return self.blocks_for(count) * self.threads_per_block

    def thread_of(self, count: int) -> np.ndarray:
        """Global thread number owning each index ``z < count``."""
        z = np.arange(count, dtype=np.int64)
        return (z // self.span) * self.threads_per_block + z % self.threads_per_block

    def thread_sizes(self, count: int) -> np.ndarray:
        return np.bincount(self.thread_of(count), minlength=self.n_threads(count))


def thread_assignment(geometry: ScanGeometry, count: int, block: int, thread: int) -> list[int]:
    """Indices scanned by thread ``thread`` of block ``block``, in scan order."""
    blocks = geometry.blocks_for(count)
    if not 0 <= block < blocks:
        raise ValueError(f"block {block} out of range [0, {blocks})")
    if not 0 <= thread < geometry.threads_per_block:
        raise ValueError(f"thread {thread} out of range [0, {geometry.threads_per_block})")
    z = block * geometry.span + thread
    out = []
    for _ in range(geometry.items_per_thread):
        if z < count:
            out.append(z)
        z += geometry.threads_per_block
    return out


@dataclass
class Partition:
    planes: np.ndarray  # (n_planes, count, words) uint64
    magnitudes: np.ndarray  # (count,) float32
    ids: np.ndarray  # (count,) int64

    def __post_init__(self):
        self.planes = np.ascontiguousarray(self.planes, dtype=np.uint64)
        self.magnitudes = np.ascontiguousarray(self.magnitudes, dtype=np.float32)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        count = self.planes.shape[1]
        if self.magnitudes.shape != (count,) or self.ids.shape != (count,):
            raise ValueError("planes, magnitudes and ids disagree in length")
        if count and not np.all(self.magnitudes > 0):
            raise ValueError("keyword magnitudes must be positive")

    @property
    def count(self) -> int:
        return self.planes.shape[1]


@dataclass
class KeywordIndex:
    dim: int
    n_planes: int
    use_residual_weights: bool
    partitions: list[Partition] = field(default_factory=list)

    @property
    def words(self) -> int:
        return n_words(self.dim)

    @property
    def count(self) -> int:
        return sum(p.count for p in self.partitions)

    @property
    def bytes_per_keyword(self) -> int:
        """Plane payload per keyword: planes x words x 8 bytes."""
        return self.n_planes * self.words * 8

    @property
    def plane_payload_bytes(self) -> int:
        return sum(p.planes.nbytes for p in self.partitions)


def refined_norms(planes: np.ndarray, dim: int, weighted: bool) -> np.ndarray:
    """Norms of refined vectors straight from packed planes.

    ``|sum_t w_t p_t|^2 = sum_{t,s} w_t w_s (p_t . p_s)`` with ``p_t . p_t = dim``;
    every term is an exact binary fraction.
    """
    n_planes = planes.shape[0]
    sq = np.zeros(planes.shape[1], dtype=np.float64)
    for t in range(n_planes):
        wt = plane_weight(t, weighted)
        sq += wt * wt * dim
        for s in range(t + 1, n_planes):
            sq += 2.0 * wt * plane_weight(s, weighted) * kernels.dot_rows(planes[t], planes[s], dim)
    return np.sqrt(sq)


def build_index_arrays(
    ids: np.ndarray,
    planes: np.ndarray,
    dim: int,
    partition_count: int = 1,
    magnitudes: np.ndarray | None = None,
    use_residual_weights: bool = True,
) -> KeywordIndex:
    """Round-robin keywords into partitions; ``planes`` is ``(n_planes, count, words)``."""
    planes = np.asarray(planes, dtype=np.uint64)
    ids = np.asarray(ids, dtype=np.int64)
    if partition_count < 1:
        raise ValueError("partition_count must be positive")
    if planes.ndim != 3 or planes.shape[2] != n_words(dim):
        raise ValueError("planes must have shape (n_planes, count, words)")
    count = planes.shape[1]
    if ids.shape != (count,):
        raise ValueError("one id per keyword required")
    if np.unique(ids).size != count:
        raise ValueError("duplicate keyword ids")
    if magnitudes is None:
        magnitudes = refined_norms(planes, dim, use_residual_weights)
    magnitudes = np.asarray(magnitudes, dtype=np.float32)
    if count and not np.all(magnitudes > 0):
        raise ValueError("keyword with zero magnitude cannot be indexed")
    parts = []
    for p in range(partition_count):
        sel = slice(p, None, partition_count)
        parts.append(Partition(planes[:, sel, :], magnitudes[sel], ids[sel]))
    return KeywordIndex(dim, planes.shape[0], use_residual_weights, parts)


def build_index(
    embeddings: Iterable[tuple[int, RbeEmbedding]],
    partition_count: int = 1,
    use_residual_weights: bool = True,
) -> KeywordIndex:
    """Index a stream of ``(id, embedding)``; magnitudes are recomputed if missing."""
    ids, rows, mags = [], [], []
    dim = n_planes = None
    for kid, emb in embeddings:
        if dim is None:
            dim, n_planes = emb.dim, emb.n_planes
        elif emb.dim != dim or emb.n_planes != n_planes:
            raise ValueError("inconsistent embedding shapes in stream")
        ids.append(kid)
        rows.append(emb.word_matrix())
        mags.append(emb.magnitude if emb.magnitude > 0 else np.nan)
    if dim is None:
        raise ValueError("cannot build an index from no embeddings")
    planes = np.stack(rows, axis=1)
    mags = np.asarray(mags, dtype=np.float64)
    missing = ~np.isfinite(mags)
    if missing.any():
        mags[missing] = refined_norms(planes[:, missing, :], dim, use_residual_weights)
    return build_index_arrays(np.asarray(ids), planes, dim, partition_count, mags, use_residual_weights)


# -- selection ----------------------------------------------------------------


@dataclass(frozen=True)
class Hit:
    score: float
    id: int
    partition: int


@dataclass(frozen=True)
class SelectionResult:
    entries: tuple[Hit, ...]
    scored: int = 0

    @property
    def ids(self) -> list[int]:
        return [h.id for h in self.entries]

    @property
    def scores(self) -> list[float]:
        return [h.score for h in self.entries]

    def __len__(self):
        return len(self.entries)


@dataclass
class ThreadQueues:
    """Per-thread survivors of one partition scan; ``index`` is -1 where empty."""

    scores: np.ndarray  # (threads, queue_length) float64
    index: np.ndarray  # (threads, queue_length) int64
    scored: int


def _query_words(query: RbeEmbedding, index: KeywordIndex) -> np.ndarray:
    if query.dim != index.dim:
        raise ValueError(f"query dim {query.dim} != index dim {index.dim}")
    return np.ascontiguousarray(query.word_matrix(), dtype=np.uint64)


def partition_scores(query: RbeEmbedding, index: KeywordIndex, partition: Partition, backend=None) -> np.ndarray:
    """Score every keyword of a partition (query norm left out)."""
    k = backend or kernels.get_backend()
    return k.scan_scores(
        _query_words(query, index), partition.planes, partition.magnitudes, index.dim, index.use_residual_weights
    )


def local_select(
    query: RbeEmbedding,
    index: KeywordIndex,
    partition: Partition,
    geometry: ScanGeometry,
    backend=None,
) -> ThreadQueues:
    """Scan one partition; every thread keeps its ``queue_length`` best items."""
    k = backend or kernels.get_backend()
    scores, idx, scored = k.scan_select(
        _query_words(query, index),
        partition.planes,
        partition.magnitudes,
        partition.ids,
        index.dim,
        index.use_residual_weights,
        geometry.threads_per_block,
        geometry.items_per_thread,
        geometry.queue_length,
        geometry.n_threads(partition.count),
    )
    return ThreadQueues(scores, idx, int(scored))


def _top(scores: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    order = np.lexsort((ids, -scores))
    return order[:n]


def global_select(queues: ThreadQueues, partition: Partition, n: int, ordinal: int = 0) -> SelectionResult:
    """Sort the surviving candidates of one partition and keep the best ``n``."""
    live = queues.index >= 0
    idx = queues.index[live]
    scores = queues.scores[live]
    ids = partition.ids[idx]
    keep = _top(scores, ids, n)
    hits = tuple(Hit(float(scores[i]), int(ids[i]), ordinal) for i in keep)
    return SelectionResult(hits, queues.scored)


def merge(results: Sequence[SelectionResult], n: int) -> SelectionResult:
    hits = [h for r in results for h in r.entries]
    hits.sort(key=lambda h: (-h.score, h.id))
    return SelectionResult(tuple(hits[:n]), sum(r.scored for r in results))


def search(
    query,
    index: KeywordIndex,
    geometry: ScanGeometry = ScanGeometry(),
    n: int = 1000,
    model=None,
    workers: int | None = None,
    backend=None,
) -> SelectionResult:
    """Top ``n`` keywords for a query embedding (or text, given a model).

    Partitions are scanned concurrently, one task per partition; the merge
    is a single deterministic sort.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if index.count == 0:
        raise ValueError("index is empty")
    if isinstance(query, str):
        if model is None:
            raise ValueError("a model is required to search by text")
        from rbe.model import embed_texts

        query = embed_texts(model, "query", [query])[0]

    def run(ordinal: int) -> SelectionResult:
        part = index.partitions[ordinal]
        if part.count == 0:
            return SelectionResult((), 0)
        queues = local_select(query, index, part, geometry, backend)
        return global_select(queues, part, n, ordinal)

    ordinals = range(len(index.partitions))
    if len(index.partitions) == 1 or workers == 1:
        results = [run(i) for i in ordinals]
    else:
        with ThreadPoolExecutor(max_workers=workers or len(index.partitions)) as pool:
            results = list(pool.map(run, ordinals))
    return merge(results, n)


def exhaustive_top_n(query: RbeEmbedding, index: KeywordIndex, n: int, backend=None) -> SelectionResult:
    """Lossless reference: score everything, full sort, keep ``n``."""
    results = []
    for ordinal, part in enumerate(index.partitions):
        if part.count == 0:
            continue
        scores = partition_scores(query, index, part, backend)
        keep = _top(scores, part.ids, n)
        results.append(
            SelectionResult(tuple(Hit(float(scores[i]), int(part.ids[i]), ordinal) for i in keep), part.count)
        )
    return merge(results, n)


def unexplained_misses(
    query: RbeEmbedding, index: KeywordIndex, geometry: ScanGeometry, n: int, result: SelectionResult | None = None
) -> list[int]:
    """Oracle ids missing from ``result`` without a thread-collision excuse.

    A miss is explained when some higher-ranked oracle id sits in the same
    thread of the same partition and ``queue_length`` of them crowd it out.
    An empty list means every miss came from the length-limited queues.
    """
    result = result or search(query, index, geometry, n, workers=1)
    oracle = exhaustive_top_n(query, index, n)
    got = set(result.ids)
    owner = {}
    for ordinal, part in enumerate(index.partitions):
        threads = geometry.thread_of(part.count)
        owner.update({int(k): (ordinal, int(t)) for k, t in zip(part.ids, threads)})
    ahead: dict[tuple[int, int], int] = {}
    out = []
    for hit in oracle.entries:
        slot = owner[hit.id]
        if hit.id not in got and ahead.get(slot, 0) < geometry.queue_length:
            out.append(hit.id)
        ahead[slot] = ahead.get(slot, 0) + 1
    return out


# -- index file ---------------------------------------------------------------


def save_index(index: KeywordIndex, path: str | Path) -> None:
    """Write the index; all integers little-endian, planes in plane order."""
    with open(path, "wb") as fh:
        fh.write(
            _INDEX_HEADER.pack(
                INDEX_MAGIC,
                INDEX_VERSION,
                index.dim,
                index.n_planes,
                int(index.use_residual_weights),
                len(index.partitions),
            )
        )
        fh.write(np.array([p.count for p in index.partitions], dtype="<u8").tobytes())
        for part in index.partitions:
            fh.write(np.ascontiguousarray(part.planes, dtype="<u8").tobytes())
            fh.write(np.ascontiguousarray(part.magnitudes, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(part.ids, dtype="<i8").tobytes())


def load_index(path: str | Path) -> KeywordIndex:
    with open(path, "rb") as fh:
        head = fh.read(_INDEX_HEADER.size)
        if len(head) < _INDEX_HEADER.size:
            raise ValueError("index file truncated")
        magic, version, dim, n_planes, weighted, n_parts = _INDEX_HEADER.unpack(head)
        if magic != INDEX_MAGIC:
            raise ValueError("not an index file (bad magic)")
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        counts = np.frombuffer(_read_exact(fh, 8 * n_parts), dtype="<u8")
        words = n_words(dim)
        parts = []
        for count in counts.tolist():
            planes = np.frombuffer(_read_exact(fh, 8 * n_planes * count * words), dtype="<u8")
            mags = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
            ids = np.frombuffer(_read_exact(fh, 8 * count), dtype="<i8")
            parts.append(Partition(planes.reshape(n_planes, count, words), mags, ids))
        if fh.read(1):
            raise ValueError("trailing bytes after index payload")
    return KeywordIndex(dim, n_planes, bool(weighted), parts)


def _read_exact(fh, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise ValueError("index file truncated")
    return data


# -- embeddings file ----------------------------------------------------------


def _record_dtype(n_planes: int, words: int) -> np.dtype:
    return np.dtype([("id", "<i8"), ("planes", "<u8", (n_planes, words)), ("magnitude", "<f4")])


def write_embeddings(
    path: str | Path,
    ids: Sequence[int],
    planes: np.ndarray,
    dim: int,
    magnitudes: np.ndarray,
    use_residual_weights: bool = True,
) -> None:
    """Header, then one fixed-width record (id, plane words, magnitude) per keyword."""
    planes = np.asarray(planes, dtype=np.uint64)
    n_planes, count, words = planes.shape
    rec = np.zeros(count, dtype=_record_dtype(n_planes, words))
    rec["id"] = ids
    rec["planes"] = planes.transpose(1, 0, 2)
    rec["magnitude"] = magnitudes
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION, dim, n_planes, int(use_residual_weights), count))
        fh.write(rec.tobytes())


@dataclass
class EmbeddingsFile:
    dim: int
    use_residual_weights: bool
    ids: np.ndarray
    planes: np.ndarray  # (n_planes, count, words)
    magnitudes: np.ndarray


def read_embeddings(path: str | Path) -> EmbeddingsFile:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise ValueError("embeddings file truncated")
    magic, version, dim, n_planes, weighted, count = _EMB_HEADER.unpack(raw[: _EMB_HEADER.size])
    if magic != EMBEDDINGS_MAGIC:
        raise ValueError("not an embeddings file (bad magic)")
    if version != EMBEDDINGS_VERSION:
        raise ValueError(f"unsupported embeddings version {version}")
    dtype = _record_dtype(n_planes, n_words(dim))
    body = raw[_EMB_HEADER.size :]
    if len(body) != count * dtype.itemsize:
        raise ValueError("embeddings file size does not match its header")
    rec = np.frombuffer(body, dtype=dtype)
    planes = np.ascontiguousarray(rec["planes"].transpose(1, 0, 2)).astype(np.uint64)
    return EmbeddingsFile(dim, bool(weighted), rec["id"].astype(np.int64), planes, rec["magnitude"].astype(np.float32))
