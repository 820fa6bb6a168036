"""Exact top-k cosine similarity search.

Similarities are accumulated in float32, sequentially over the vector
dimension, so every (query, row) score is bit-identical no matter how the
work is split. Ranking uses the total order (similarity desc, index asc).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator

import numba as nb
import numpy as np

from .embedding_store import EmbeddingSet

QUERY_BLOCK = 64
_SENTINEL = np.iinfo(np.int64).max


@dataclass(frozen=True)
class Neighbor:
    index: int
    similarity: float


@dataclass(frozen=True, eq=False)
class NeighborList:
    """Neighbors of one query, best first."""

    indices: np.ndarray
    similarities: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[Neighbor]:
        for i, s in zip(self.indices.tolist(), self.similarities.tolist()):
            yield Neighbor(i, s)

    def __getitem__(self, pos) -> Neighbor:
        return Neighbor(int(self.indices[pos]), float(self.similarities[pos]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, NeighborList):
            return NotImplemented
        return (np.array_equal(self.indices, other.indices)
                and self.similarities.tobytes() == other.similarities.tobytes())

    def head(self, k: int) -> "NeighborList":
        return NeighborList(self.indices[:k], self.similarities[:k])


@nb.njit(nogil=True, cache=True)
def _worse(s1, i1, s2, i2):
    return s1 < s2 or (s1 == s2 and i1 > i2)


@nb.njit(nogil=True, cache=True)
def _sift_down(hs, hi, pos, k):
    while True:
        left = 2 * pos + 1
        if left >= k:
            return
        w = left
        right = left + 1
        if right < k and _worse(hs[right], hi[right], hs[left], hi[left]):
            w = right
        if _worse(hs[w], hi[w], hs[pos], hi[pos]):
            hs[pos], hs[w] = hs[w], hs[pos]
            hi[pos], hi[w] = hi[w], hi[pos]
            pos = w
        else:
            return


@nb.njit(nogil=True, cache=True)
def _topk_block(q_t, xs, row_offset, skip, heap_sim, heap_idx):
    # q_t: dim x B (queries transposed); xs: shard rows; heaps are B x k
    # min-heaps with the worst kept neighbor at position 0.
    dim, nq = q_t.shape
    k = heap_sim.shape[1]
    acc = np.empty(nq, np.float32)
    for j in range(xs.shape[0]):
        for b in range(nq):
            acc[b] = 0.0
        for t in range(dim):
            v = xs[j, t]
            for b in range(nq):
                acc[b] += q_t[t, b] * v
        g = row_offset + j
        for b in range(nq):
            if g == skip[b]:
                continue
            s = acc[b]
            if _worse(heap_sim[b, 0], heap_idx[b, 0], s, g):
                heap_sim[b, 0] = s
                heap_idx[b, 0] = g
                _sift_down(heap_sim[b], heap_idx[b], 0, k)


def _check(queries: EmbeddingSet, database: EmbeddingSet, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if queries.dim != database.dim:
        raise ValueError(f"dim mismatch: queries {queries.dim}, database {database.dim}")


def _skip_rows(queries: EmbeddingSet, database: EmbeddingSet, exclude_self: bool) -> np.ndarray:
    skip = np.full(queries.count, -1, dtype=np.int64)
    if exclude_self:
        for qi, qid in enumerate(queries.ids):
            if qid in database:
                skip[qi] = database.row(qid)
    return skip


def _shard_bounds(n: int, shards: int) -> list[tuple[int, int]]:
    shards = max(1, min(shards, n))
    edges = np.linspace(0, n, shards + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def search_arrays(queries: EmbeddingSet, database: EmbeddingSet, k: int,
                  exclude_self: bool = False, threads: int = 1):
    """Top-k search returning padded ``(indices, similarities)`` arrays.

    Rows shorter than ``k`` are padded with index -1 and similarity -inf.
    """
    _check(queries, database, k)
    nq, n = queries.count, database.count
    skip = _skip_rows(queries, database, exclude_self)
    out_idx = np.full((nq, k), -1, dtype=np.int64)
    out_sim = np.full((nq, k), -np.inf, dtype=np.float32)
    if nq == 0 or n == 0:
        return out_idx, out_sim

    threads = max(1, int(threads))
    blocks = [(a, min(a + QUERY_BLOCK, nq)) for a in range(0, nq, QUERY_BLOCK)]
    shards = _shard_bounds(n, math.ceil(threads / len(blocks)))
    xs = database.vectors

    def run(task):
        (qa, qb), (ra, rb) = task
        q_t = np.ascontiguousarray(queries.vectors[qa:qb].T)
        hs = np.full((qb - qa, k), -np.inf, dtype=np.float32)
        hi = np.full((qb - qa, k), _SENTINEL, dtype=np.int64)
        _topk_block(q_t, xs[ra:rb], ra, skip[qa:qb], hs, hi)
        return hs, hi

    tasks = [(blk, shard) for blk in blocks for shard in shards]
    if threads == 1:
        results = [run(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))

    per_block = len(shards)
    for bi, (qa, qb) in enumerate(blocks):
        parts = results[bi * per_block:(bi + 1) * per_block]
        sims = np.concatenate([p[0] for p in parts], axis=1)
        idx = np.concatenate([p[1] for p in parts], axis=1)
        order = np.lexsort((idx, -sims), axis=-1)[:, :k]
        sims = np.take_along_axis(sims, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        idx[idx == _SENTINEL] = -1
        out_idx[qa:qb] = idx
        out_sim[qa:qb] = sims
    return out_idx, out_sim


def _to_lists(idx: np.ndarray, sims: np.ndarray) -> list[NeighborList]:
    lists = []
    for row_i, row_s in zip(idx, sims):
        keep = row_i >= 0
        lists.append(NeighborList(row_i[keep].copy(), row_s[keep].copy()))
    return lists


def search(queries: EmbeddingSet, database: EmbeddingSet, k: int,
           exclude_self: bool = False, threads: int = 1) -> list[NeighborList]:
    """Exact k-NN by cosine similarity, one :class:`NeighborList` per query.

    With ``exclude_self`` a database row whose id equals the query id is
    skipped. Output does not depend on ``threads``.
    """
    return _to_lists(*search_arrays(queries, database, k, exclude_self, threads))


def search_reference(queries: EmbeddingSet, database: EmbeddingSet, k: int,
                     exclude_self: bool = False) -> list[NeighborList]:
    """Naive single-threaded search used as an oracle for :func:`search`."""
    _check(queries, database, k)
    xs = database.vectors
    out = []
    for qid, q in zip(queries.ids, queries.vectors):
        sims = np.zeros(database.count, dtype=np.float32)
        for t in range(database.dim):
            sims += xs[:, t] * q[t]
        rows = np.arange(database.count)
        if exclude_self and qid in database:
            keep = rows != database.row(qid)
            rows, sims = rows[keep], sims[keep]
        order = np.lexsort((rows, -sims))[:k]
        out.append(NeighborList(rows[order].astype(np.int64), sims[order]))
    return out


def write_neighbors_csv(path, queries: EmbeddingSet, database: EmbeddingSet,
                        lists: list[NeighborList]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id,neighbor_id,rank,similarity\n")
        for qid, nl in zip(queries.ids, lists):
            for rank, (i, s) in enumerate(zip(nl.indices.tolist(), nl.similarities.tolist()), 1):
                fh.write(f"{qid},{database.ids[i]},{rank},{s!r}\n")
