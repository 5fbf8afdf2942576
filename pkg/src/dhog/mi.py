"""Plug-in mutual information over soft labellings and the DHOG objective.

All quantities are in nats.  Inputs are ``(n, c)`` probability tensors, one
row per sample in the minibatch.  Logarithms see values clamped at
:data:`EPS`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .assignment import align_heads
from .autodiff import Tensor

EPS = 1e-9


@dataclass
class JointMatrix:
    p: Tensor
    row_marginal: Tensor
    col_marginal: Tensor


def joint(a: Tensor, b: Tensor, symmetrize: bool = False) -> JointMatrix:
    """Empirical joint ``(1/n) sum_s a_s b_s^T`` with its marginals."""
    if a.shape != b.shape:
        raise ad.ShapeError(f"joint: label distributions differ in shape {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n == 0:
        raise ValueError("joint: empty minibatch")
    p = ad.matmul(ad.transpose(a), b) * (1.0 / n)
    if symmetrize:
        p = (p + ad.transpose(p)) * 0.5
        p = p / ad.sum(p)
    return JointMatrix(p, ad.sum(p, axis=1), ad.sum(p, axis=0))


def _plogp(x: Tensor) -> Tensor:
    return ad.sum(x * ad.log(ad.clampmin(x, EPS)))


def mi_from_joint(j: JointMatrix) -> Tensor:
    return _plogp(j.p) - _plogp(j.row_marginal) - _plogp(j.col_marginal)


def mi_aug(views: Sequence[Tensor]) -> Tensor:
    """Mean symmetrised-joint MI over all unordered pairs of augmented views."""
    if len(views) < 2:
        raise ValueError(f"mi_aug needs at least 2 augmentations, got {len(views)}")
    terms = [mi_from_joint(joint(a, b, symmetrize=True)) for a, b in itertools.combinations(views, 2)]
    return _mean(terms)


def mi_head_pair(z_later: Tensor, z_earlier: Tensor, perm: Sequence[int] | None = None) -> Tensor:
    """MI between a later head and an earlier (stopped) head on the same view.

    ``perm[a]`` is the label of the earlier head matched to label ``a`` of the
    later head; its columns are reordered accordingly before the joint.
    """
    if z_later.shape != z_earlier.shape:
        raise ad.ShapeError(f"mi_head_pair: shapes {z_later.shape} and {z_earlier.shape} differ")
    z_earlier = ad.stop_gradient(z_earlier)
    if perm is not None:
        z_earlier = ad.take_columns(z_earlier, perm)
    return mi_from_joint(joint(z_later, z_earlier))


def mi_pull(head_views: Sequence[Sequence[Tensor]]) -> Tensor:
    """Mean of :func:`mi_aug` over heads.  ``head_views[i][v]`` is head i on view v."""
    return _mean([mi_aug(v) for v in head_views])


def push_terms(head_views: Sequence[Sequence[Tensor]], align: bool = True) -> list[Tensor]:
    """Per-head push contributions ``(sum_{j<i} MI_head(c_i, c_j)) / i``.

    Averaged over the augmentation views; the first head contributes zero.
    Heads are numbered from 1 for the divisor.
    """
    k = len(head_views)
    if k == 0:
        return []
    n_views = len(head_views[0])
    out = [ad.tensor(0.0)]
    for i in range(1, k):
        per_view = []
        for v in range(n_views):
            zi = head_views[i][v]
            pairs = []
            for j in range(i):
                zj = head_views[j][v]
                perm = align_heads(zi.data, zj.data).perm if align else None
                pairs.append(mi_head_pair(zi, zj, perm))
            per_view.append(_total(pairs) * (1.0 / (i + 1)))
        out.append(_mean(per_view))
    return out


def mi_push(head_views: Sequence[Sequence[Tensor]], align: bool = True) -> Tensor:
    return _total(push_terms(head_views, align))


def dhog_loss(pull: Tensor, push: Tensor, alpha: float) -> Tensor:
    """Loss to minimise: ``-(pull - alpha * push)``."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return ad.neg(pull - push * alpha)


def dhog_objective(pull_views: Sequence[Sequence[Tensor]], push_views: Sequence[Sequence[Tensor]] | None,
                   alpha: float, align: bool = True) -> Tensor:
    """Composite loss from head outputs.

    ``push_views`` excludes overclustering heads; pass None to reuse
    ``pull_views`` (useful when gradients into the trunk do not matter).
    """
    pull = mi_pull(pull_views)
    if alpha == 0:
        return ad.neg(pull)
    push = mi_push(pull_views if push_views is None else push_views, align)
    return dhog_loss(pull, push, alpha)


def _total(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def _mean(terms: Sequence[Tensor]) -> Tensor:
    return _total(terms) * (1.0 / len(terms))


def mi_numpy(p: np.ndarray) -> float:
    """Plain-array MI of a joint matrix, for diagnostics outside the graph."""
    p = np.asarray(p, dtype=np.float64)
    with ad.no_grad():
        return mi_from_joint(JointMatrix(ad.tensor(p), ad.tensor(p.sum(1)), ad.tensor(p.sum(0)))).item()
