"""Seeded synthetic retrieval benchmarks.

Every class has two modes on the unit sphere, far apart, so some items of a
class look nothing like the rest of it in embedding space. Local-feature
corpora plant shared, affinely related keypoints among images of a scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .cleaning import ImageFeatures
from .embedding_store import EmbeddingSet


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    dim: int = 64
    n_classes: int = 50
    items_per_class: int = 40
    dissimilar_fraction: float = 0.3
    cluster_spread: float = 1.4
    splits: tuple[float, float, float] = (0.5, 0.4, 0.1)  # train, index, query
    # angle between the two modes of a class, in degrees
    mode_angle: tuple[float, float] = (100.0, 130.0)

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.n_classes < 1 or self.items_per_class < 1:
            raise ValueError("class and item counts must be positive")
        if not 0.0 <= self.dissimilar_fraction <= 1.0:
            raise ValueError("dissimilar_fraction must lie in [0, 1]")
        if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1) > 1e-9:
            raise ValueError("split ratios must be three non-negative numbers summing to 1")
        lo, hi = self.mode_angle
        if not 60.0 <= lo <= hi <= 180.0:
            raise ValueError("mode_angle must satisfy 60 <= lo <= hi <= 180")
        if self.cluster_spread < 0:
            raise ValueError("cluster_spread must be non-negative")


@dataclass(eq=False)
class SynthData:
    train: EmbeddingSet
    index: EmbeddingSet
    queries: EmbeddingSet
    ground_truth: dict[str, set[str]]
    classes: dict[str, str] = field(default_factory=dict)  # every id -> true label
    modes: dict[str, int] = field(default_factory=dict)  # every id -> 0 or 1


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _split_counts(n: int, ratios) -> list[int]:
    raw = [r * n for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _mode_split(sizes: list[int], n_far: int) -> list[int]:
    """Far-mode items per split, proportional, with every split seeing both modes."""
    far = _split_counts(n_far, [sz / sum(sizes) for sz in sizes])
    for s in range(3):
        if far[s] == 0 and sizes[s] > 1 and n_far >= 3:
            donor = max(range(3), key=lambda i: far[i])
            far[donor] -= 1
            far[s] += 1
    return [min(f, sz) for f, sz in zip(far, sizes)]


def generate(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    sizes = _split_counts(cfg.items_per_class, cfg.splits)
    if 0 in sizes:
        raise ValueError(f"a split is empty with per-class sizes {sizes}")
    n_far = int(round(cfg.dissimilar_fraction * cfg.items_per_class))

    rows: list[list] = [[], [], []]  # per split: (vector, label, mode)
    for c in range(cfg.n_classes):
        label = f"L{c:04d}"
        near = _unit(rng.standard_normal(cfg.dim))
        ortho = rng.standard_normal(cfg.dim)
        ortho = _unit(ortho - (ortho @ near) * near)
        phi = math.radians(rng.uniform(*cfg.mode_angle))
        far = math.cos(phi) * near + math.sin(phi) * ortho
        far_per_split = _mode_split(sizes, n_far)
        for s, size in enumerate(sizes):
            for j in range(size):
                mode = 1 if j < far_per_split[s] else 0
                centre = far if mode else near
                noise = rng.standard_normal(cfg.dim) * (cfg.cluster_spread / math.sqrt(cfg.dim))
                rows[s].append((_unit(centre + noise), label, mode))

    prefixes = ("t", "i", "q")
    sets = []
    classes: dict[str, str] = {}
    modes: dict[str, int] = {}
    for s, split_rows in enumerate(rows):
        perm = rng.permutation(len(split_rows))
        width = max(5, len(str(len(split_rows))))
        ids = [f"{prefixes[s]}{n:0{width}d}" for n in range(len(split_rows))]
        vecs = np.array([split_rows[p][0] for p in perm], dtype=np.float64).reshape(-1, cfg.dim)
        for item, p in zip(ids, perm):
            classes[item] = split_rows[p][1]
            modes[item] = split_rows[p][2]
        labels = {i: classes[i] for i in ids} if s == 0 else None
        sets.append(EmbeddingSet.from_arrays(vecs.astype(np.float32), ids, labels))

    train, index, queries = sets
    members: dict[str, set[str]] = {}
    for item in index.ids:
        members.setdefault(classes[item], set()).add(item)
    gt = {q: set(members.get(classes[q], ())) for q in queries.ids}
    return SynthData(train, index, queries, gt, classes, modes)


# ---------------------------------------------------------------- local features

AffineSampler = Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]]


def identity_affine(rng: np.random.Generator):
    return np.eye(2), np.zeros(2)


def random_affine(rng: np.random.Generator, max_rot_deg=30.0, scale=(0.8, 1.2),
                  max_shear=0.15, max_shift=50.0):
    rot = math.radians(rng.uniform(-max_rot_deg, max_rot_deg))
    r = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
    sx, sy = rng.uniform(*scale, size=2)
    shear = np.array([[1.0, rng.uniform(-max_shear, max_shear)], [0.0, 1.0]])
    lin = r @ shear @ np.diag([sx, sy])
    return lin, rng.uniform(-max_shift, max_shift, size=2)


@dataclass(frozen=True)
class FeatureConfig:
    seed: int = 0
    n_shared: int = 60  # keypoints every image of a scene inherits
    n_private: int = 20  # unrelated keypoints per image
    desc_dim: int = 32
    image_size: float = 640.0
    noise_px: float = 0.5
    desc_noise: float = 0.05

    def __post_init__(self):
        if self.n_shared < 0 or self.n_private < 0 or self.desc_dim < 1:
            raise ValueError("invalid feature config")
        if self.image_size <= 0 or self.noise_px < 0 or self.desc_noise < 0:
            raise ValueError("invalid feature config")


def generate_features(ids: Sequence[str], scene_of: Mapping[str, Hashable | None],
                      cfg: FeatureConfig = FeatureConfig(),
                      affine: AffineSampler = random_affine) -> dict[str, ImageFeatures]:
    """Local features where images sharing a scene key are geometrically related.

    Each scene owns ``n_shared`` base keypoints with descriptors; an image of
    the scene sees them through its own affine map plus pixel noise. Images
    whose scene is ``None`` only get random keypoints.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    scenes: dict = {}
    corpus: dict[str, ImageFeatures] = {}
    for item in ids:
        key = scene_of.get(item)
        parts_kp, parts_desc = [], []
        if key is not None and cfg.n_shared:
            if key not in scenes:
                pts = rng.uniform(0, size, size=(cfg.n_shared, 2))
                desc = _unit(rng.standard_normal((cfg.n_shared, cfg.desc_dim)))
                scenes[key] = (pts, desc)
            pts, desc = scenes[key]
            lin, shift = affine(rng)
            parts_kp.append(pts @ lin.T + shift + rng.normal(0, cfg.noise_px, pts.shape)
                            if cfg.noise_px else pts @ lin.T + shift)
            parts_desc.append(_unit(desc + cfg.desc_noise * rng.standard_normal(desc.shape)))
        if cfg.n_private:
            parts_kp.append(rng.uniform(0, size, size=(cfg.n_private, 2)))
            parts_desc.append(_unit(rng.standard_normal((cfg.n_private, cfg.desc_dim))))
        if parts_kp:
            kp = np.vstack(parts_kp)
            desc = np.vstack(parts_desc)
            perm = rng.permutation(len(kp))
            kp, desc = kp[perm], desc[perm]
        else:
            kp, desc = np.empty((0, 2)), np.empty((0, cfg.desc_dim))
        corpus[item] = ImageFeatures(kp, desc)
    return corpus
