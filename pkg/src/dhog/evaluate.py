"""Clustering metrics, unsupervised head selection and the K-means pixel baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .assignment import confusion, remap_to_classes
from .data import AugmentationPolicy, augment_once, eval_view
from .mi import mi_aug
from .model import hard_labels


@dataclass
class ClusterMetrics:
    accuracy: float
    nmi: float
    ari: float
    head_index: int
    n: int


def _contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty labelling")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    m = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(m, (ai, bi), 1)
    return m


def accuracy(pred, truth, c: int) -> float:
    """Fraction of samples matched after the optimal cluster-to-class remap."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    return remap_to_classes(pred, truth, c).objective_value / len(pred)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """I(a;b) / sqrt(H(a) H(b)) in nats.

    If either labelling is constant the value is 1 when both are constant
    (identical partitions) and 0 otherwise.
    """
    m = _contingency(a, b)
    n = int(m.sum())
    ha, hb = _entropy(m.sum(1), n), _entropy(m.sum(0), n)
    if ha == 0 or hb == 0:
        return 1.0 if ha == hb == 0 else 0.0
    nz = m > 0
    pij = m[nz] / n
    outer = np.outer(m.sum(1), m.sum(0))[nz] / n ** 2
    mi = float((pij * np.log(pij / outer)).sum())
    return min(1.0, max(0.0, mi / np.sqrt(ha * hb)))


def ari(a, b) -> float:
    """Adjusted Rand index from pair counts."""
    m = _contingency(a, b)
    n = int(m.sum())
    if n < 2:
        raise ValueError("ARI needs at least two samples")

    def pairs(x):
        return (x * (x - 1) // 2).sum()

    index = pairs(m)
    sa, sb = pairs(m.sum(1)), pairs(m.sum(0))
    expected = sa * sb / (n * (n - 1) / 2)
    max_index = (sa + sb) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def cluster_metrics(pred, truth, c: int, head_index: int = 0) -> ClusterMetrics:
    return ClusterMetrics(accuracy(pred, truth, c), nmi(pred, truth), ari(pred, truth), head_index, len(pred))


def head_labels(model, x: np.ndarray, batch_size: int = 1000) -> list:
    probs, _ = model.predict_proba(x, batch_size)
    return [hard_labels(p) for p in probs]


def per_head_nmi(model, x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator,
                 batch_size: int = 1000) -> list:
    """NMI between each head's hard labellings of two fresh augmented draws of ``x``.

    A head that puts every sample under one label carries no grouping, so it
    scores 0 here even though two identical constant labellings have NMI 1.
    """
    a = head_labels(model, augment_once(x, policy, rng), batch_size)
    b = head_labels(model, augment_once(x, policy, rng), batch_size)
    return [nmi(la, lb) if len(np.unique(la)) > 1 and len(np.unique(lb)) > 1 else 0.0 for la, lb in zip(a, b)]


def select_head(model, x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator,
                batch_size: int = 1000) -> int:
    """1-based index of the head with the highest augmentation NMI (no labels used)."""
    scores = per_head_nmi(model, x, policy, rng, batch_size)
    return int(np.argmax(scores)) + 1


def train_mi_aug(model, x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator,
                 batch_size: int = 1000) -> list:
    """Soft MI between augmentations per head, estimated over the whole of ``x``."""
    views = [model.predict_proba(augment_once(x, policy, rng), batch_size)[0] for _ in range(policy.repeats)]
    with ad.no_grad():
        return [mi_aug([ad.tensor(v[i]) for v in views]).item() for i in range(model.k)]


def evaluate_heads(model, x: np.ndarray, truth: np.ndarray, policy: AugmentationPolicy) -> list:
    """Supervised metrics per head on the deterministic evaluation view."""
    labels = head_labels(model, eval_view(x, policy))
    keep = truth >= 0
    return [cluster_metrics(lab[keep], truth[keep], max(h.c, int(truth.max()) + 1), i)
            for i, (lab, h) in enumerate(zip(labels, model.cfg.heads), start=1)]


# ---------------------------------------------------------------------------
# K-means baseline
# ---------------------------------------------------------------------------

def _kmeanspp(x, c, rng, x_sq):
    n = len(x)
    centers = np.empty((c, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.maximum(x_sq - 2 * x @ centers[0] + centers[0] @ centers[0], 0)
    for k in range(1, c):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[k] = x[i]
        d2 = np.minimum(d2, np.maximum(x_sq - 2 * x @ centers[k] + centers[k] @ centers[k], 0))
    return centers


def kmeans(x: np.ndarray, c: int, restarts: int = 3, seed: int = 0, max_iter: int = 100,
           tol: float = 1e-6) -> tuple:
    """Lloyd's algorithm with k-means++ seeding; best restart by inertia.

    Returns (labels, centers, inertia).
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if c < 1 or c > n:
        raise ValueError(f"cannot form {c} clusters from {n} points")
    x_sq = np.einsum("ij,ij->i", x, x)
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centers = _kmeanspp(x, c, rng, x_sq)
        prev = np.inf
        for _ in range(max_iter):
            d2 = x_sq[:, None] - 2 * x @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
            labels = np.argmin(d2, axis=1)
            inertia = float(np.maximum(d2[np.arange(n), labels], 0).sum())
            counts = np.bincount(labels, minlength=c)
            centers = centers.copy()
            for k in np.flatnonzero(counts):
                centers[k] = x[labels == k].mean(axis=0)
            if prev - inertia <= tol * max(inertia, 1e-300):
                break
            prev = inertia
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    return best


def kmeans_pixels(x: np.ndarray, truth: np.ndarray, c: int, restarts: int = 3, seed: int = 0) -> ClusterMetrics:
    """K-means on flattened [0, 1] pixels, scored against ground truth."""
    if c < 2:
        raise ValueError(f"need at least 2 clusters, got {c}")
    flat = x.reshape(len(x), -1)
    flat = flat.astype(np.float64) / 255.0 if x.dtype == np.uint8 else flat.astype(np.float64)
    labels, _, _ = kmeans(flat, c, restarts, seed)
    return cluster_metrics(labels, truth, max(c, int(np.max(truth)) + 1))


def confusion_for(pred, truth, c: int) -> np.ndarray:
    """Confusion counts with predicted clusters already remapped to classes."""
    perm = remap_to_classes(pred, truth, c).perm
    return confusion(perm[np.asarray(pred)], truth, c)
