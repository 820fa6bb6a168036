"""Instance-label prediction by k-NN soft-voting against a labeled train set.

For a sample x with neighbors N(x) in the train set the score of label c is
``(1/k) * sum(sim(x, x') for x' in N(x) if label(x') == c)``; the prediction
is the best-scoring label, ties going to the lexicographically smallest one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import knn
from .embedding_store import EmbeddingSet, LabelTable

DEFAULT_K = 3

VOTED = "voted"
KNOWN = "known-label"


@dataclass(frozen=True)
class Prediction:
    label: str
    score: float
    provenance: str = VOTED


@dataclass(eq=False)
class PredictionTable:
    """Predicted label and score per item id."""

    entries: dict[str, Prediction] = field(default_factory=dict)
    _by_label: dict | None = field(default=None, init=False, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, item_id) -> bool:
        return item_id in self.entries

    def __getitem__(self, item_id: str) -> Prediction:
        return self.entries[item_id]

    def __eq__(self, other) -> bool:
        return isinstance(other, PredictionTable) and self.entries == other.entries

    def ids(self) -> list[str]:
        return list(self.entries)

    def members(self, label: str) -> list[str]:
        """Ids predicted as ``label``, by descending score then ascending id."""
        if self._by_label is None:
            groups: dict[str, list[str]] = {}
            for item, p in self.entries.items():
                groups.setdefault(p.label, []).append(item)
            for lab, items in groups.items():
                items.sort(key=lambda i: (-self.entries[i].score, i))
            self._by_label = groups
        return self._by_label.get(label, [])


class SoftVoter:
    """Reusable voter over one train set.

    Train rows are reordered by id so that neighbor tie-breaks, and hence
    predictions, do not depend on the row order of the input set.
    """

    def __init__(self, train: EmbeddingSet, k: int = DEFAULT_K, threads: int = 1):
        if train.labels is None:
            raise ValueError("train set has no labels")
        if train.count == 0:
            raise ValueError("empty train set")
        if k < 1:
            raise ValueError("k must be >= 1")
        self.train = train.subset(sorted(train.ids))
        self.k = k
        self.threads = threads
        self.table: LabelTable = self.train.label_table()
        self._ordinals = np.array(
            [self.table.ordinal(self.train.labels[i]) for i in self.train.ids], dtype=np.int64)

    def predict_many(self, samples: EmbeddingSet) -> list[Prediction]:
        idx, sims = knn.search_arrays(samples, self.train, self.k, threads=self.threads)
        return [self._decide(row_i, row_s) for row_i, row_s in zip(idx, sims)]

    def _decide(self, row_i: np.ndarray, row_s: np.ndarray) -> Prediction:
        votes: dict[int, float] = {}
        for i, s in zip(row_i.tolist(), row_s.tolist()):
            if i < 0:
                break
            c = int(self._ordinals[i])
            votes[c] = votes.get(c, 0.0) + s
        best = min(votes, key=lambda c: (-votes[c], c))
        return Prediction(self.table.label(best), votes[best] / self.k, VOTED)


def vote(sample, train: EmbeddingSet, k: int = DEFAULT_K) -> Prediction:
    """Predict the label of one unit vector."""
    vec = np.asarray(sample, dtype=np.float32).reshape(1, -1)
    single = EmbeddingSet.from_arrays(vec, ["__sample__"], normalize=False)
    return SoftVoter(train, k).predict_many(single)[0]


def predict_index(index: EmbeddingSet, train: EmbeddingSet, k: int = DEFAULT_K,
                  threads: int = 1) -> PredictionTable:
    """Vote every item of ``index``; the offline half of re-ranking."""
    if index.count and index.dim != train.dim:
        raise ValueError(f"dim mismatch: index {index.dim}, train {train.dim}")
    voter = SoftVoter(train, k, threads)
    preds = voter.predict_many(index) if index.count else []
    return PredictionTable(dict(zip(index.ids, preds)))


def mark_known(table: PredictionTable, train_members: Iterable[str],
               labels: Mapping[str, str]) -> PredictionTable:
    """Pin items with known labels to that label with score exactly 1.0."""
    entries = dict(table.entries)
    for item in train_members:
        if item not in labels:
            raise KeyError(f"no label for id {item!r}")
        entries[item] = Prediction(labels[item], 1.0, KNOWN)
    return PredictionTable(entries)


def write_predictions(path, table: PredictionTable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item, p in table.entries.items():
            fh.write(f"{item}\t{p.label}\t{p.score!r}\t{p.provenance}\n")


def read_predictions(path) -> PredictionTable:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in (VOTED, KNOWN):
                raise ValueError(f"{path}:{lineno}: expected id, label, score, provenance")
            if parts[0] in entries:
                raise ValueError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
            entries[parts[0]] = Prediction(parts[1], float(parts[2]), parts[3])
    return PredictionTable(entries)
