"""ArcFace / CosFace losses with L2 weight regularization and analytic
gradients, plus a central finite-difference checker."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ARCFACE = "arcface"
COSFACE = "cosface"


@dataclass(frozen=True, eq=False)
class LossInstance:
    features: np.ndarray  # N x d, unit rows
    weights: np.ndarray  # n x d, unit rows (one per class)
    targets: np.ndarray  # N class indices
    s: float = 30.0
    m: float = 0.3
    beta: float = 1e-5
    backbone_sq_norm: float = 0.0  # ||W_M||^2, supplied from outside

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.int64)
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError("features and weights must be N x d and n x d")
        if y.shape != (x.shape[0],) or np.any(y < 0) or np.any(y >= w.shape[0]):
            raise ValueError("targets must be N indices in [0, n)")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "targets", y)


@dataclass(frozen=True, eq=False)
class LossOutput:
    loss: float
    grad_features: np.ndarray
    grad_weights: np.ndarray


def _check_unit(name, a, tol=1e-6):
    norms = np.linalg.norm(a, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"{name} rows must have unit norm")


def _cosines(inst: LossInstance, validate: bool) -> np.ndarray:
    if validate:
        _check_unit("features", inst.features)
        _check_unit("weights", inst.weights)
    cos = inst.features @ inst.weights.T
    if validate and np.any(np.abs(cos) > 1 + 1e-6):
        raise ValueError("|cos theta| exceeds 1")
    return cos


def _margin_loss(inst: LossInstance, kind: str, validate: bool = True) -> LossOutput:
    x, w, y = inst.features, inst.weights, inst.targets
    n_batch = x.shape[0]
    rows = np.arange(n_batch)
    cos = np.clip(_cosines(inst, validate), -1.0, 1.0)
    c_t = cos[rows, y]

    logits = inst.s * cos
    dlogit_dcos = np.full_like(cos, inst.s)
    if kind == ARCFACE:
        sin_t = np.sqrt(np.maximum(0.0, 1.0 - c_t * c_t))
        cm, sm = math.cos(inst.m), math.sin(inst.m)
        logits[rows, y] = inst.s * (c_t * cm - sin_t * sm)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(sin_t > 0, c_t * sm / sin_t, 0.0)
        dlogit_dcos[rows, y] = inst.s * (cm + slope)
    elif kind == COSFACE:
        logits[rows, y] = inst.s * (c_t - inst.m)
    else:
        raise ValueError(f"unknown margin kind {kind!r}")

    top = logits.max(axis=1, keepdims=True)
    expz = np.exp(logits - top)
    denom = expz.sum(axis=1)
    log_prob_t = logits[rows, y] - top[:, 0] - np.log(denom)
    data_loss = -log_prob_t.mean()
    reg = inst.beta * (float(np.sum(w * w)) + inst.backbone_sq_norm)

    dlogits = expz / denom[:, None]
    dlogits[rows, y] -= 1.0
    dlogits /= n_batch
    dcos = dlogits * dlogit_dcos
    grad_x = dcos @ w
    grad_w = dcos.T @ x + 2.0 * inst.beta * w
    return LossOutput(float(data_loss + reg), grad_x, grad_w)


def arcface_loss(inst: LossInstance) -> LossOutput:
    """Additive angular margin: target logit ``s * cos(theta + m)``.

    ``cos(theta + m)`` is expanded as ``cos t cos m - sin t sin m`` and
    applied as is, including the regime ``theta + m > pi``.
    """
    return _margin_loss(inst, ARCFACE)


def cosface_loss(inst: LossInstance) -> LossOutput:
    """Additive cosine margin: target logit ``s * (cos theta - m)``."""
    return _margin_loss(inst, COSFACE)


def cosine_softmax_loss(features, weights, targets, s: float) -> float:
    """Plain cross-entropy over ``s``-scaled cosine logits."""
    logits = s * (np.asarray(features, np.float64) @ np.asarray(weights, np.float64).T)
    y = np.asarray(targets)
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def reference_loss(features, weights, targets, s, m, beta, backbone_sq_norm, kind) -> float:
    """Loss evaluated literally through ``acos``; used as the finite-difference target."""
    x = np.asarray(features, np.float64)
    w = np.asarray(weights, np.float64)
    total = 0.0
    for xi, yi in zip(x, targets):
        terms = []
        for j, wj in enumerate(w):
            c = min(1.0, max(-1.0, float(np.dot(wj, xi))))
            if j != yi:
                terms.append(s * c)
            elif kind == ARCFACE:
                terms.append(s * math.cos(math.acos(c) + m))
            else:
                terms.append(s * (c - m))
        top = max(terms)
        lse = top + math.log(sum(math.exp(t - top) for t in terms))
        total += lse - terms[yi]
    return total / len(x) + beta * (float(np.sum(w * w)) + backbone_sq_norm)


def random_instance(rng: np.random.Generator, n_batch=4, dim=8, n_classes=5,
                    s=30.0, m=0.3, beta=1e-5) -> LossInstance:
    x = rng.standard_normal((n_batch, dim))
    w = rng.standard_normal((n_classes, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    y = rng.integers(0, n_classes, n_batch)
    return LossInstance(x, w, y, s, m, beta)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(inst: LossInstance, kind: str, step: float = 1e-3) -> dict[str, float]:
    """Relative errors of the analytic gradients against central differences.

    Entries are perturbed one at a time without re-normalizing rows, i.e.
    the loss is differentiated as a function of the raw cosine inputs.
    """
    analytic = _margin_loss(inst, kind)
    args = (inst.targets, inst.s, inst.m, inst.beta, inst.backbone_sq_norm, kind)

    def numeric(which):
        base = inst.features if which == "x" else inst.weights
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            hi, lo = base.copy(), base.copy()
            hi[idx] += step
            lo[idx] -= step
            if which == "x":
                f_hi = reference_loss(hi, inst.weights, *args)
                f_lo = reference_loss(lo, inst.weights, *args)
            else:
                f_hi = reference_loss(inst.features, hi, *args)
                f_lo = reference_loss(inst.features, lo, *args)
            grad[idx] = (f_hi - f_lo) / (2 * step)
        return grad

    return {
        "features": _rel_err(analytic.grad_features, numeric("x")),
        "weights": _rel_err(analytic.grad_weights, numeric("w")),
        "loss": abs(analytic.loss - reference_loss(inst.features, inst.weights, *args)),
    }


def run_gradient_suite(n_instances: int = 20, seed: int = 0, step: float = 1e-3,
                       **shape) -> list[dict]:
    """Finite-difference checks for both losses on random instances."""
    rng = np.random.default_rng(seed)
    results = []
    for trial in range(n_instances):
        inst = random_instance(rng, **shape)
        for kind in (ARCFACE, COSFACE):
            results.append({"trial": trial, "kind": kind, **gradient_check(inst, kind, step)})
    return results
