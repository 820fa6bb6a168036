"""Train-set cleaning by k-NN candidate filtering and RANSAC-affine
spatial verification over precomputed local features."""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple

import numpy as np

from . import knn
from .embedding_store import EmbeddingSet

LFT_MAGIC = b"LFT1"


class DegenerateSampleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageFeatures:
    """Keypoints (``n x 2`` pixel coords) and unit descriptors (``n x dim``)."""

    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float32).reshape(-1, 2)
        desc = np.asarray(self.descriptors, dtype=np.float32)
        if desc.ndim != 2 or desc.shape[0] != kp.shape[0]:
            raise ValueError("keypoints and descriptors disagree in count")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


class Correspondence(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float
    similarity: float


@dataclass(frozen=True, eq=False)
class Matches:
    src: np.ndarray  # m x 2
    dst: np.ndarray  # m x 2
    similarity: np.ndarray  # m

    def __len__(self) -> int:
        return len(self.similarity)

    def __iter__(self) -> Iterator[Correspondence]:
        for (x1, y1), (x2, y2), s in zip(self.src.tolist(), self.dst.tolist(),
                                         self.similarity.tolist()):
            yield Correspondence(x1, y1, x2, y2, s)

    @classmethod
    def from_correspondences(cls, corr) -> "Matches":
        arr = np.asarray(list(corr), dtype=np.float64).reshape(-1, 5)
        return cls(arr[:, 0:2], arr[:, 2:4], arr[:, 4])


@dataclass(frozen=True, eq=False)
class AffineModel:
    linear: np.ndarray  # 2 x 2
    translation: np.ndarray  # 2

    def __post_init__(self):
        if not (np.all(np.isfinite(self.linear)) and np.all(np.isfinite(self.translation))):
            raise ValueError("affine model is not finite")
        if abs(np.linalg.det(self.linear)) <= 1e-9:
            raise ValueError("affine linear part is singular")

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.linear.T + self.translation


@dataclass(frozen=True)
class CleaningConfig:
    nn_pool: int = 1000
    per_label_cap: int = 100
    inlier_min: int = 30  # a neighbor verifies with strictly more inliers
    tau_freq: int = 3  # an image survives with at least this many verified neighbors
    ransac_iters: int = 1000
    inlier_px: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("nn_pool", "per_label_cap", "ransac_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.inlier_min < 0 or self.tau_freq < 0 or not self.inlier_px > 0:
            raise ValueError("inlier_min, tau_freq must be >= 0 and inlier_px > 0")


def match_features(a: ImageFeatures, b: ImageFeatures) -> Matches:
    """Mutual nearest neighbours under cosine similarity of descriptors."""
    if len(a) and len(b) and a.dim != b.dim:
        raise ValueError(f"descriptor dim mismatch: {a.dim} vs {b.dim}")
    if len(a) == 0 or len(b) == 0:
        return Matches(np.empty((0, 2)), np.empty((0, 2)), np.empty(0))
    sims = a.descriptors.astype(np.float64) @ b.descriptors.astype(np.float64).T
    best_b = np.argmax(sims, axis=1)  # argmax keeps the lowest index on ties
    best_a = np.argmax(sims, axis=0)
    ia = np.flatnonzero(best_a[best_b] == np.arange(len(a)))
    ib = best_b[ia]
    return Matches(a.keypoints[ia].astype(np.float64), b.keypoints[ib].astype(np.float64),
                   sims[ia, ib])


def _canonical(matches: Matches) -> tuple[np.ndarray, np.ndarray]:
    src, dst = np.asarray(matches.src, np.float64), np.asarray(matches.dst, np.float64)
    order = np.lexsort((matches.similarity, dst[:, 1], dst[:, 0], src[:, 1], src[:, 0]))
    return src[order], dst[order]


def _distinct_triplets(rng: np.random.Generator, n: int, iters: int) -> np.ndarray:
    i0 = rng.integers(0, n, iters)
    i1 = rng.integers(0, n - 1, iters)
    i1 += i1 >= i0
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 = rng.integers(0, n - 2, iters)
    i2 += i2 >= lo
    i2 += i2 >= hi
    return np.stack([i0, i1, i2], axis=1)


def _lstsq_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    h = np.hstack([src, np.ones((len(src), 1))])
    params, *_ = np.linalg.lstsq(h, dst, rcond=None)
    return params  # 3 x 2, rows: x, y, 1


def _count(params: np.ndarray, src_h: np.ndarray, dst: np.ndarray, inlier_px: float) -> np.ndarray:
    err = src_h @ params - dst
    return np.hypot(err[..., 0], err[..., 1]) < inlier_px


def ransac_affine(matches: Matches, iters: int = 1000, inlier_px: float = 10.0,
                  seed: int = 0) -> tuple[AffineModel, int]:
    """Fit an affine map to correspondences; returns (model, inlier count).

    Minimal samples are three distinct matches drawn by a seeded generator
    over the canonically sorted match list, so the result does not depend
    on the input order. Collinear samples are discarded but still count as
    iterations. The winning model is refit by least squares on its inliers.
    """
    n = len(matches)
    if n < 3:
        raise ValueError(f"affine RANSAC needs at least 3 matches, got {n}")
    src, dst = _canonical(matches)
    src_h = np.hstack([src, np.ones((n, 1))])
    rng = np.random.default_rng(seed)
    tri = _distinct_triplets(rng, n, iters)

    sample = src_h[tri]  # iters x 3 x 3
    det = np.linalg.det(sample)
    scale = max(1.0, float(np.abs(src).max()))
    ok = np.abs(det) > 1e-9 * scale * scale
    if not np.any(ok):
        raise DegenerateSampleError("every sampled triplet was collinear")
    params = np.full((iters, 3, 2), np.nan)
    params[ok] = np.linalg.solve(sample[ok], dst[tri[ok]])
    lin_det = params[:, 0, 0] * params[:, 1, 1] - params[:, 1, 0] * params[:, 0, 1]
    ok &= np.abs(lin_det) > 1e-9

    counts = np.zeros(iters, dtype=np.int64)
    chunk = max(1, 2_000_000 // n)
    for a in range(0, iters, chunk):
        sel = np.flatnonzero(ok[a:a + chunk]) + a
        if len(sel):
            counts[sel] = _count(params[sel], src_h[None], dst[None], inlier_px).sum(axis=1)
    if not np.any(ok):
        raise DegenerateSampleError("no sampled triplet gave a non-singular affine map")
    best = int(np.argmax(np.where(ok, counts, -1)))
    best_params, best_count = params[best], int(counts[best])

    inliers = _count(best_params, src_h, dst, inlier_px)
    refit = _lstsq_affine(src[inliers], dst[inliers])
    refit_count = int(_count(refit, src_h, dst, inlier_px).sum())
    if refit_count >= best_count and abs(np.linalg.det(refit[:2].T)) > 1e-9:
        best_params, best_count = refit, refit_count
    return AffineModel(best_params[:2].T.copy(), best_params[2].copy()), best_count


def pair_seed(base_seed: int, a: str, b: str) -> int:
    return (int(base_seed) ^ zlib.crc32(f"{a}\x00{b}".encode("utf-8"))) & 0xFFFFFFFF


def verify_pair(fa: ImageFeatures, fb: ImageFeatures, cfg: CleaningConfig, seed: int) -> int:
    """Inlier count between two images; 0 when no model can be fit."""
    m = match_features(fa, fb)
    if len(m) < 3:
        return 0
    try:
        return ransac_affine(m, cfg.ransac_iters, cfg.inlier_px, seed)[1]
    except DegenerateSampleError:
        return 0


def candidate_pairs(train: EmbeddingSet, cfg: CleaningConfig, threads: int = 1):
    """Same-label neighbors (up to the cap) among each image's k-NN pool."""
    if train.labels is None:
        raise ValueError("train set has no labels")
    lists = knn.search(train, train, cfg.nn_pool, exclude_self=True, threads=threads)
    pairs = {}
    for qid, nl in zip(train.ids, lists):
        lab = train.labels[qid]
        same = [train.ids[i] for i in nl.indices.tolist() if train.labels[train.ids[i]] == lab]
        pairs[qid] = same[:cfg.per_label_cap]
    return pairs


def verified_counts(train: EmbeddingSet, features: Mapping[str, ImageFeatures],
                    cfg: CleaningConfig, threads: int = 1) -> dict[str, int]:
    missing = [i for i in train.ids if i not in features]
    if missing:
        raise KeyError(f"no local features for id {missing[0]!r}")
    pairs = candidate_pairs(train, cfg, threads)
    jobs = [(a, b) for a in train.ids for b in pairs[a]]

    def run(job):
        a, b = job
        return verify_pair(features[a], features[b], cfg, pair_seed(cfg.seed, a, b))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            inliers = list(pool.map(run, jobs))
    else:
        inliers = [run(j) for j in jobs]
    counts = dict.fromkeys(train.ids, 0)
    for (a, _), c in zip(jobs, inliers):
        if c > cfg.inlier_min:
            counts[a] += 1
    return counts


def select(counts: Mapping[str, int], tau_freq: int) -> list[str]:
    return [i for i, c in counts.items() if c >= tau_freq]


def clean(train: EmbeddingSet, features: Mapping[str, ImageFeatures],
          cfg: CleaningConfig = CleaningConfig(), threads: int = 1) -> list[str]:
    """Ids of train images that keep at least ``tau_freq`` verified neighbors."""
    return select(verified_counts(train, features, cfg, threads), cfg.tau_freq)


def write_features(path, corpus: Mapping[str, ImageFeatures]) -> None:
    with open(path, "wb") as fh:
        fh.write(LFT_MAGIC)
        fh.write(struct.pack("<I", len(corpus)))
        for item, f in corpus.items():
            raw = item.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", len(f), f.dim))
            block = np.hstack([f.keypoints, f.descriptors]).astype("<f4")
            fh.write(block.tobytes(order="C"))


def read_features(path) -> dict[str, ImageFeatures]:
    raw = Path(path).read_bytes()
    if raw[:4] != LFT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ValueError(f"{path}: truncated file")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    corpus: dict[str, ImageFeatures] = {}
    dims = set()
    for _ in range(count):
        (id_len,) = take("<I")
        if pos + id_len > len(raw):
            raise ValueError(f"{path}: truncated file")
        item = raw[pos:pos + id_len].decode("utf-8")
        pos += id_len
        n_kp, dim = take("<II")
        nbytes = 4 * n_kp * (2 + dim)
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated file")
        block = np.frombuffer(raw, dtype="<f4", count=n_kp * (2 + dim), offset=pos)
        block = block.reshape(n_kp, 2 + dim).astype(np.float32)
        pos += nbytes
        if item in corpus:
            raise ValueError(f"{path}: duplicate id {item!r}")
        if n_kp:
            dims.add(dim)
        corpus[item] = ImageFeatures(block[:, :2], block[:, 2:])
    if len(dims) > 1:
        raise ValueError(f"{path}: descriptor dim varies across images")
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes")
    return corpus
