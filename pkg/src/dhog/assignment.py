"""Square linear assignment (Hungarian method) and the label alignments built on it.

Labels are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AlignmentMap:
    """``perm[i]`` is the column (label) assigned to row (label) ``i``."""

    perm: np.ndarray
    objective_value: float

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.intp)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError(f"not a permutation: {perm.tolist()}")
        object.__setattr__(self, "perm", perm)


def _hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path Hungarian method, O(m^3).

    Returns (row_to_col, u, v) where u, v are optimal dual potentials with
    ``cost[i, j] - u[i] - v[j] >= 0``.
    """
    m = cost.shape[0]
    u = np.zeros(m + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)  # p[j]: row matched to column j (1-based, 0 = none)
    way = np.zeros(m + 1, dtype=np.intp)
    a = np.zeros((m + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(m, dtype=np.intp)
    row_to_col[p[1:] - 1] = np.arange(m)
    return row_to_col, u[1:], v[1:]


def _lexicographic_min(tight: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Smallest perfect matching (row-major lexicographic) inside the tight graph."""
    m = len(match)
    match = match.copy()
    col_owner = np.empty(m, dtype=np.intp)
    col_owner[match] = np.arange(m)
    for r in range(m):
        for c in np.flatnonzero(tight[r]):
            if c >= match[r]:
                break
            # Re-route: r takes c; try to free a column for c's owner via an
            # alternating path through unfixed rows, ending at r's old column.
            if col_owner[c] < r:
                continue
            path = _alternating_path(tight, match, col_owner, col_owner[c], match[r], r)
            if path is None:
                continue
            for row, col in path:
                match[row] = col
                col_owner[col] = row
            match[r] = c
            col_owner[c] = r
            break
    return match


def _alternating_path(tight, match, col_owner, start_row, goal_col, first_free):
    """DFS for rows > ``first_free`` re-matching that frees ``goal_col``.

    Returns a list of (row, new_col) moves or None.
    """
    parent: dict[int, tuple[int, int]] = {}
    stack = [start_row]
    seen_rows = {start_row}
    while stack:
        row = stack.pop()
        for col in np.flatnonzero(tight[row]):
            if col == match[row]:
                continue
            if col == goal_col:
                moves = [(row, col)]
                while row in parent:
                    prev_row, prev_col = parent[row]
                    moves.append((prev_row, prev_col))
                    row = prev_row
                return moves
            owner = col_owner[col]
            if owner <= first_free or owner in seen_rows:
                continue
            seen_rows.add(owner)
            parent[owner] = (row, col)
            stack.append(owner)
    return None


def solve(costs, maximize: bool = False) -> AlignmentMap:
    """Optimal permutation for a square cost matrix.

    Ties are resolved toward the lexicographically smallest optimal permutation.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    m = c.shape[0]
    if m == 0:
        return AlignmentMap(np.zeros(0, dtype=np.intp), 0.0)
    work = -c if maximize else c
    match, u, v = _hungarian(work)
    reduced = work - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(work).max()))
    tight = reduced <= 1e-12 * scale * m
    tight[np.arange(m), match] = True
    perm = _lexicographic_min(tight, match)
    return AlignmentMap(perm, float(c[np.arange(m), perm].sum()))


def align_heads(z_i, z_j) -> AlignmentMap:
    """Match head j's labels to head i's by maximal soft agreement.

    ``perm[a]`` is the label of head j paired with label ``a`` of head i.
    Accepts arrays or tensors; values only (nothing is differentiated).
    """
    a = np.asarray(getattr(z_i, "data", z_i), dtype=np.float64)
    b = np.asarray(getattr(z_j, "data", z_j), dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"align_heads: shapes {a.shape} and {b.shape} differ")
    return solve(a.T @ b, maximize=True)


def confusion(pred, truth, c: int) -> np.ndarray:
    """Counts ``M[p, t]`` of samples with predicted label p and true label t."""
    pred = np.asarray(pred, dtype=np.intp)
    truth = np.asarray(truth, dtype=np.intp)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    for name, lab in (("pred", pred), ("truth", truth)):
        if lab.size and (lab.min() < 0 or lab.max() >= c):
            raise ValueError(f"{name} labels outside 0..{c - 1}")
    m = np.zeros((c, c), dtype=np.int64)
    np.add.at(m, (pred, truth), 1)
    return m


def remap_to_classes(pred, truth, c: int) -> AlignmentMap:
    """Cluster-to-class mapping maximising the number of matched samples."""
    if len(pred) < 1:
        raise ValueError("remap_to_classes needs at least one sample")
    return solve(confusion(pred, truth, c), maximize=True)
