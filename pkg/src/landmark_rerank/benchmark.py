"""End-to-end re-ranking runs on a synthetic benchmark: baseline k-NN,
sort-step only, sort + insert, and the (k, tau) sweep."""

from __future__ import annotations

from dataclasses import dataclass

from . import knn
from .metrics import evaluate
from .rerank import RankedList, RerankContext, insert_step, sort_step
from .soft_voting import Prediction, PredictionTable, SoftVoter, predict_index
from .synth import SynthData


def baseline_lists(data: SynthData, capacity: int = 100, threads: int = 1) -> list[RankedList]:
    lists = knn.search(data.queries, data.index, capacity, threads=threads)
    return [RankedList(q, tuple(data.index.ids[i] for i in nl.indices.tolist()), capacity)
            for q, nl in zip(data.queries.ids, lists)]


def oracle_predictions(data: SynthData) -> tuple[dict[str, Prediction], PredictionTable]:
    """Ground-truth labels with score 1.0 for every query and index item."""
    queries = {q: Prediction(data.classes[q], 1.0) for q in data.queries.ids}
    table = PredictionTable({i: Prediction(data.classes[i], 1.0) for i in data.index.ids})
    return queries, table


def voted_predictions(data: SynthData, k: int = 3, threads: int = 1):
    voter = SoftVoter(data.train, k, threads)
    queries = dict(zip(data.queries.ids, voter.predict_many(data.queries)))
    return queries, predict_index(data.index, data.train, k, threads)


@dataclass
class AblationResult:
    baseline: float
    sort: float
    sort_insert: float

    def as_row(self) -> tuple[float, float, float]:
        return self.baseline, self.sort, self.sort_insert


def ablation(data: SynthData, query_preds, table: PredictionTable, tau: float,
             base: list[RankedList] | None = None) -> AblationResult:
    base = base if base is not None else baseline_lists(data)
    sorted_lists, full = [], []
    for rl in base:
        ctx = RerankContext(query_preds[rl.query_id], table, tau)
        s = sort_step(rl, ctx)
        sorted_lists.append(s)
        full.append(insert_step(s, ctx))
    m = "mAP@100"
    return AblationResult(evaluate(base, data.ground_truth).metrics[m],
                          evaluate(sorted_lists, data.ground_truth).metrics[m],
                          evaluate(full, data.ground_truth).metrics[m])


def hyperparameter_grid(data: SynthData, ks=(1, 3, 5), taus=(0.0, 0.6, 1.2),
                        threads: int = 1) -> list[tuple[int, float, float]]:
    """mAP@100 of sort + insert for every (k, tau)."""
    base = baseline_lists(data, threads=threads)
    rows = []
    for k in ks:
        qp, table = voted_predictions(data, k, threads)
        for tau in taus:
            rows.append((k, tau, ablation(data, qp, table, tau, base).sort_insert))
    return rows


def format_grid(rows) -> str:
    lines = ["k\ttau\tmAP@100"]
    lines += [f"{k}\t{tau!r}\t{score!r}" for k, tau, score in rows]
    return "\n".join(lines) + "\n"
