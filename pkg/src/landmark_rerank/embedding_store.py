"""Embedding matrices with id/label sidecars, the EMB1 file format, and
multi-scale descriptor merging."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")

# Rows already this close to unit length are left untouched so that
# load -> save -> load does not perturb the last bit.
_UNIT_SLACK = 1e-7


class EmbeddingFormatError(ValueError):
    pass


def _normalize_rows(vectors: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Unit-normalize rows with float64 accumulation; returns float32."""
    acc = vectors.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", acc, acc))
    zero = norms <= eps
    if np.any(zero):
        raise EmbeddingFormatError(f"zero-norm row at position {int(np.flatnonzero(zero)[0])}")
    out = vectors.astype(np.float32)
    fix = np.abs(norms - 1.0) > _UNIT_SLACK
    if np.any(fix):
        out[fix] = (acc[fix] / norms[fix, None]).astype(np.float32)
    return out


@dataclass(frozen=True)
class LabelTable:
    """Dense 0-based ordinals for label strings, ordered lexicographically."""

    labels: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if list(self.labels) != sorted(set(self.labels)):
            raise ValueError("labels must be unique and sorted")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @classmethod
    def from_labels(cls, labels) -> "LabelTable":
        return cls(tuple(sorted(set(labels))))

    def __len__(self) -> int:
        return len(self.labels)

    def ordinal(self, label: str) -> int:
        return self._index[label]

    def label(self, ordinal: int) -> str:
        return self.labels[ordinal]


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Immutable ``count x dim`` float32 matrix of unit rows plus item ids.

    ``labels`` maps id -> label string and is only set for train sets.
    Construct through :meth:`from_arrays` or :func:`load_embeddings`.
    """

    vectors: np.ndarray
    ids: tuple[str, ...]
    labels: Mapping[str, str] | None = None
    _row: dict = field(init=False, repr=False)

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2 or v.dtype != np.float32:
            raise EmbeddingFormatError("vectors must be a 2-d float32 array")
        if v.shape[1] < 1:
            raise EmbeddingFormatError("dim must be positive")
        if len(self.ids) != v.shape[0]:
            raise EmbeddingFormatError(
                f"count mismatch: {v.shape[0]} vectors, {len(self.ids)} ids")
        row = {}
        for i, item in enumerate(self.ids):
            if item in row:
                raise EmbeddingFormatError(f"duplicate id {item!r}")
            row[item] = i
        if self.labels is not None:
            missing = [i for i in self.ids if i not in self.labels]
            if missing:
                raise EmbeddingFormatError(f"no label for id {missing[0]!r}")
        object.__setattr__(self, "_row", row)
        v.setflags(write=False)

    @classmethod
    def from_arrays(cls, vectors, ids: Sequence[str], labels: Mapping[str, str] | None = None,
                    normalize: bool = True) -> "EmbeddingSet":
        v = np.asarray(vectors)
        if v.ndim == 1 and v.size == 0:
            raise EmbeddingFormatError("cannot infer dim of an empty 1-d array")
        if not np.all(np.isfinite(v)):
            raise EmbeddingFormatError("non-finite value in vectors")
        v = np.array(v, dtype=np.float32, order="C")
        if normalize and len(v):
            v = _normalize_rows(v)
        if labels is not None:
            labels = dict(labels)
        return cls(v, tuple(str(i) for i in ids), labels)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.count

    def row(self, item_id: str) -> int:
        return self._row[item_id]

    def __contains__(self, item_id) -> bool:
        return item_id in self._row

    def vector(self, item_id: str) -> np.ndarray:
        return self.vectors[self._row[item_id]]

    def label_table(self) -> LabelTable:
        if self.labels is None:
            raise ValueError("embedding set has no labels")
        return LabelTable.from_labels(self.labels.values())

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        rows = [self._row[i] for i in ids]
        labels = None if self.labels is None else {i: self.labels[i] for i in ids}
        return EmbeddingSet(np.ascontiguousarray(self.vectors[rows]), tuple(ids), labels)


def ids_path(path) -> Path:
    return Path(path).with_suffix(".ids")


def read_labels(path) -> dict[str, str]:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected id<TAB>label")
            if parts[0] in labels:
                raise EmbeddingFormatError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
            labels[parts[0]] = parts[1]
    return labels


def write_labels(path, es: EmbeddingSet) -> None:
    if es.labels is None:
        raise ValueError("embedding set has no labels")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in es.ids:
            fh.write(f"{i}\t{es.labels[i]}\n")


def load_embeddings(path, normalize: bool = True, labels_path=None) -> EmbeddingSet:
    """Read an EMB1 file and its ``.ids`` sidecar (and optional labels TSV)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError(f"{path}: truncated header")
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
    if dim == 0:
        raise EmbeddingFormatError(f"{path}: dim must be positive")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * count * dim:
        raise EmbeddingFormatError(
            f"{path}: payload has {len(payload)} bytes, header says {count}x{dim}")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)

    with open(ids_path(path), encoding="utf-8", newline="") as fh:
        text = fh.read()
    ids = text.split("\n")
    if ids and ids[-1] == "":
        ids.pop()
    if len(ids) != count:
        raise EmbeddingFormatError(f"{ids_path(path)}: {len(ids)} ids for {count} vectors")

    labels = read_labels(labels_path) if labels_path is not None else None
    if labels is not None:
        missing = [i for i in ids if i not in labels]
        if missing:
            raise EmbeddingFormatError(f"{labels_path}: no label for id {missing[0]!r}")
    return EmbeddingSet.from_arrays(vectors, ids, labels, normalize=normalize)


def save_embeddings(path, es: EmbeddingSet, labels_path=None) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, es.count, es.dim))
        fh.write(es.vectors.astype("<f4", copy=False).tobytes(order="C"))
    with open(ids_path(path), "w", encoding="utf-8", newline="\n") as fh:
        for i in es.ids:
            fh.write(i + "\n")
    if labels_path is not None:
        write_labels(labels_path, es)


def merge_multiscale(scales: Sequence[EmbeddingSet]) -> EmbeddingSet:
    """Average per-id descriptors from several scales and re-normalize."""
    if not scales:
        raise ValueError("need at least one embedding set")
    first = scales[0]
    for other in scales[1:]:
        if other.dim != first.dim:
            raise EmbeddingFormatError(f"dim mismatch: {first.dim} vs {other.dim}")
        if other.ids != first.ids:
            raise EmbeddingFormatError("id mismatch across scales")
    stack = np.stack([s.vectors.astype(np.float64) for s in scales])
    # sorted along the scale axis so the sum does not depend on list order
    mean = np.sort(stack, axis=0).sum(axis=0) / len(scales)
    try:
        merged = _normalize_rows(mean, eps=1e-12)
    except EmbeddingFormatError as exc:
        raise EmbeddingFormatError(f"{exc} after merging scales (exact cancellation)") from None
    return EmbeddingSet(merged, first.ids, first.labels)
