"""Two-stage discriminative re-ranking: sort-step then gated insert-step."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Collection, Iterable

from .soft_voting import Prediction, PredictionTable

DEFAULT_CAPACITY = 100
DEFAULT_TAU = 0.6


@dataclass(frozen=True)
class RankedList:
    query_id: str
    items: tuple[str, ...]
    capacity: int = DEFAULT_CAPACITY

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"duplicate ids in ranked list for {self.query_id!r}")
        if len(self.items) > self.capacity:
            raise ValueError(f"ranked list for {self.query_id!r} exceeds capacity")

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class RerankContext:
    query: Prediction
    table: PredictionTable
    tau: float = DEFAULT_TAU

    def _lookup(self, item: str) -> Prediction:
        try:
            return self.table[item]
        except KeyError:
            raise KeyError(f"no prediction for id {item!r}") from None

    def is_positive(self, item: str) -> bool:
        return self._lookup(item).label == self.query.label


def sort_step(ranked: RankedList, ctx: RerankContext) -> RankedList:
    """Stable partition: predicted positives first, order kept within groups."""
    flags = [ctx.is_positive(i) for i in ranked.items]
    pos = [i for i, f in zip(ranked.items, flags) if f]
    neg = [i for i, f in zip(ranked.items, flags) if not f]
    return replace(ranked, items=tuple(pos + neg))


def insert_step(ranked: RankedList, ctx: RerankContext,
                pool: Collection[str] | None = None) -> RankedList:
    """Insert unretrieved predicted positives after the positive block.

    A candidate x enters only when ``query_score + score(x) > tau``; the
    list is then cut back to capacity from the tail. ``pool`` defaults to
    every id in the prediction table.
    """
    if pool is not None:
        missing = [i for i in pool if i not in ctx.table]
        if missing:
            raise KeyError(f"no prediction for id {missing[0]!r}")
    n_pos = 0
    for item in ranked.items:
        if not ctx.is_positive(item):
            break
        n_pos += 1
    if any(ctx.is_positive(i) for i in ranked.items[n_pos:]):
        raise ValueError("insert_step expects a sort-stepped list")

    taken = set(ranked.items)
    room = ranked.capacity - n_pos
    inserted: list[str] = []
    if room > 0:
        pool_set = None if pool is None else set(pool)
        qs = ctx.query.score
        for item in ctx.table.members(ctx.query.label):
            if len(inserted) >= room:
                break
            if item in taken or (pool_set is not None and item not in pool_set):
                continue
            if qs + ctx.table[item].score > ctx.tau:
                inserted.append(item)
            else:
                # members are score-sorted, so no later candidate passes
                break
    items = list(ranked.items[:n_pos]) + inserted + list(ranked.items[n_pos:])
    return replace(ranked, items=tuple(items[:ranked.capacity]))


def rerank(ranked: RankedList, ctx: RerankContext,
           pool: Collection[str] | None = None) -> RankedList:
    return insert_step(sort_step(ranked, ctx), ctx, pool)


def read_ranked_lists(path, capacity: int = DEFAULT_CAPACITY) -> list[RankedList]:
    """Parse an ``id,images`` CSV (space-separated ids per query)."""
    out = []
    seen = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "images"]:
            raise ValueError(f"{path}: expected header 'id,images', got {header!r}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            qid, images = row
            if qid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate query {qid!r}")
            seen.add(qid)
            out.append(RankedList(qid, tuple(images.split()), capacity))
    return out


def write_ranked_lists(path, lists: Iterable[RankedList]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,images\n")
        for rl in lists:
            fh.write(f"{rl.query_id},{' '.join(rl.items)}\n")
