"""GLD-style retrieval metrics: mAP@100, P@10 and MeanPos."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Collection, Iterable, Mapping, Sequence

from .rerank import RankedList


def ap_at_k(items: Sequence[str], relevant: Collection[str], k: int) -> float:
    """Average precision over the top ``k`` of a ranked id list.

    Normalized by ``min(len(relevant), k)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set is empty")
    if len(set(items)) != len(items):
        raise ValueError("duplicate ids in ranked list")
    hits = 0
    total = 0.0
    for rank, item in enumerate(items[:k], 1):
        if item in relevant:
            hits += 1
            total += hits / rank
    return total / min(len(relevant), k)


def precision_at_k(items: Sequence[str], relevant: Collection[str], k: int) -> float:
    return sum(1 for i in items[:k] if i in relevant) / k


def first_relevant_position(items: Sequence[str], relevant: Collection[str], k: int) -> int:
    for rank, item in enumerate(items[:k], 1):
        if item in relevant:
            return rank
    return k + 1


@dataclass
class MetricReport:
    metrics: dict[str, float]
    per_query: list[tuple[str, float, float, int]] = field(default_factory=list)
    skipped: int = 0

    def summary(self) -> str:
        lines = [f"{name}={value:.8f}" for name, value in self.metrics.items()]
        lines.append(f"queries={len(self.per_query)} skipped={self.skipped}")
        return "\n".join(lines)

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("query_id\tap@100\tp@10\tpos\n")
            for qid, ap, p10, pos in self.per_query:
                fh.write(f"{qid}\t{ap!r}\t{p10!r}\t{pos}\n")


def evaluate(lists: Iterable[RankedList | tuple[str, Sequence[str]]],
             gt: Mapping[str, Collection[str]], k_map: int = 100, k_prec: int = 10) -> MetricReport:
    """Score ranked lists against ground truth.

    Queries whose relevant set is empty are left out of every mean; a gt
    query without a list counts as an empty list.
    """
    by_query: dict[str, Sequence[str]] = {}
    for entry in lists:
        qid, items = (entry.query_id, entry.items) if isinstance(entry, RankedList) else entry
        if qid in by_query:
            raise ValueError(f"duplicate ranked list for query {qid!r}")
        if qid not in gt:
            raise KeyError(f"query {qid!r} has no ground truth")
        by_query[qid] = tuple(items)

    rows = []
    skipped = 0
    for qid, relevant in gt.items():
        if not relevant:
            skipped += 1
            continue
        relevant = set(relevant)
        items = by_query.get(qid, ())
        rows.append((qid, ap_at_k(items, relevant, k_map),
                     precision_at_k(items, relevant, k_prec),
                     first_relevant_position(items, relevant, k_map)))
    n = len(rows)
    metrics = {
        f"mAP@{k_map}": sum(r[1] for r in rows) / n if n else 0.0,
        f"P@{k_prec}": sum(r[2] for r in rows) / n if n else 0.0,
        "MeanPos": sum(r[3] for r in rows) / n if n else float(k_map + 1),
    }
    return MetricReport(metrics, rows, skipped)


def read_ground_truth(path) -> dict[str, set[str]]:
    gt = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["query_id", "relevant_ids"]:
            raise ValueError(f"{path}: expected header 'query_id,relevant_ids'")
        for lineno, row in enumerate(reader, 2):
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields")
            if row[0] in gt:
                raise ValueError(f"{path}:{lineno}: duplicate query {row[0]!r}")
            gt[row[0]] = set(row[1].split())
    return gt


def write_ground_truth(path, gt: Mapping[str, Collection[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id,relevant_ids\n")
        for qid, rel in gt.items():
            fh.write(f"{qid},{' '.join(sorted(rel))}\n")
