"""Average (AQE) and alpha-weighted (alpha-QE) query expansion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import knn
from .embedding_store import EmbeddingSet


@dataclass(frozen=True)
class QEConfig:
    n_expand: int = 10  # top-ranked items combined, the query itself included
    alpha: float = 3.0

    def __post_init__(self):
        if self.n_expand < 1:
            raise ValueError("n_expand must be >= 1")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")


AQE = QEConfig(n_expand=10, alpha=0.0)


def expansion_weights(similarities, alpha: float) -> np.ndarray:
    sims = np.asarray(similarities, dtype=np.float64)
    if alpha == 0:
        return np.ones_like(sims)
    return np.maximum(sims, 0.0) ** alpha


def expand_query(query, neighbor_vectors, similarities, cfg: QEConfig) -> np.ndarray:
    """New unit query from the query plus its top ``n_expand - 1`` neighbors.

    ``neighbor_vectors`` rows are aligned with ``similarities`` and sorted
    best first. The query keeps weight 1.
    """
    q = np.asarray(query, dtype=np.float64)
    take = cfg.n_expand - 1
    xs = np.asarray(neighbor_vectors, dtype=np.float64)[:take]
    w = expansion_weights(np.asarray(similarities)[:take], cfg.alpha)
    combined = q + w @ xs if len(xs) else q.copy()
    norm = np.sqrt(combined @ combined)
    if norm < 1e-12:
        raise ValueError("expanded query has zero norm")
    return combined / norm


def expand_all(queries: EmbeddingSet, database: EmbeddingSet,
               neighbors: list[knn.NeighborList], cfg: QEConfig) -> EmbeddingSet:
    rows = [
        expand_query(q, database.vectors[nl.indices], nl.similarities, cfg)
        for q, nl in zip(queries.vectors, neighbors)
    ]
    vecs = np.array(rows, dtype=np.float32).reshape(len(rows), queries.dim)
    return EmbeddingSet.from_arrays(vecs, queries.ids, normalize=False)


def qe_search(queries: EmbeddingSet, database: EmbeddingSet, k: int, cfg: QEConfig,
              threads: int = 1) -> list[knn.NeighborList]:
    """Retrieve, expand each query, and retrieve again at the same ``k``."""
    first = knn.search(queries, database, max(k, cfg.n_expand - 1), threads=threads)
    expanded = expand_all(queries, database, first, cfg)
    return knn.search(expanded, database, k, threads=threads)
