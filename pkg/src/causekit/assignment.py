"""Optimal bipartite matching of predicted to ground-truth entities.

The solver wraps scipy's linear_sum_assignment and then refines the
solution to the lexicographically smallest (row, col) sequence among all
equal-cost optima, so golden tests see one deterministic answer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import giou
from .graph import Entity

# Two assignments whose totals differ by less than this are treated as
# equal-cost when refining tie-breaks.
_COST_TOL = 1e-9


class NonFiniteCost(ValueError):
    pass


@dataclass(frozen=True)
class EntityMatching:
    """One-to-one pred/gt entity assignment after threshold gating."""

    pairs: tuple[tuple[int, int, float], ...]  # (pred_id, gt_id, giou)
    unmatched_pred: frozenset[int]
    unmatched_gt: frozenset[int]

    def pred_to_gt(self) -> dict[int, int]:
        return {p: g for p, g, _ in self.pairs}

    def matched_gt_ids(self) -> set[int]:
        return {g for _, g, _ in self.pairs}


def _ordered_total(matrix: np.ndarray, pairs: list[tuple[int, int]]) -> float:
    # Row-order summation so equal assignments compare bit-identically.
    total = 0.0
    for r, c in sorted(pairs):
        total += float(matrix[r, c])
    return total


def _solve(matrix: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = linear_sum_assignment(matrix)
    return sorted(zip(rows.tolist(), cols.tolist()))


def hungarian(costs) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment over a rectangular cost matrix.

    Returns min(rows, cols) pairs sorted by row. Among equal-cost optima,
    returns the lexicographically smallest (row, col) sequence. An empty
    matrix yields an empty assignment.
    """
    matrix = np.asarray(costs, dtype=float)
    if matrix.size == 0:
        return []
    if matrix.ndim != 2:
        raise NonFiniteCost(f"cost matrix must be 2-dimensional, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteCost("cost matrix contains non-finite values")

    n_rows, n_cols = matrix.shape
    optimum = _ordered_total(matrix, _solve(matrix))

    # Greedy lexicographic refinement: walk rows in order, pin the smallest
    # column (or leave the row unassigned) that still reaches the optimum.
    fixed: list[tuple[int, int]] = []
    fixed_cost = 0.0
    free_rows = list(range(n_rows))
    free_cols = list(range(n_cols))
    while free_rows and free_cols:
        row = free_rows[0]
        rest_rows = free_rows[1:]
        chosen: int | None = None
        for col in free_cols:
            rest_cols = [c for c in free_cols if c != col]
            candidate = fixed_cost + float(matrix[row, col])
            if rest_rows and rest_cols:
                sub = matrix[np.ix_(rest_rows, rest_cols)]
                sub_pairs = _solve(sub)
                candidate += _ordered_total(sub, sub_pairs)
            if abs(candidate - optimum) <= _COST_TOL * max(1.0, abs(optimum)):
                chosen = col
                break
        if chosen is None:
            # Only possible when rows outnumber columns: this row stays
            # unassigned in every lexicographically-minimal optimum.
            free_rows.pop(0)
            continue
        fixed.append((row, chosen))
        fixed_cost += float(matrix[row, chosen])
        free_rows.pop(0)
        free_cols.remove(chosen)
    return fixed


def match_entities(pred: list[Entity], gt: list[Entity], threshold: float,
                   gate: str = "post") -> EntityMatching:
    """Match predicted entities to ground truth with Hungarian on 1 - GIoU.

    With gate="post" (default) the assignment is computed globally and
    pairs under the GIoU threshold are then demoted to unmatched; with
    gate="pre" sub-threshold cells are masked out before assignment.
    """
    if gate not in ("post", "pre"):
        raise ValueError(f"gate must be 'post' or 'pre', got {gate!r}")
    if not pred or not gt:
        return EntityMatching(
            pairs=(),
            unmatched_pred=frozenset(e.id for e in pred),
            unmatched_gt=frozenset(e.id for e in gt),
        )

    overlaps = np.array([[giou(p.box, g.box) for g in gt] for p in pred])
    costs = 1.0 - overlaps
    if gate == "pre":
        # Large finite cost keeps the matrix solvable while making gated
        # cells unattractive; they are dropped below regardless.
        costs = np.where(overlaps < threshold, 4.0, costs)

    assigned = hungarian(costs)
    pairs = []
    for r, c in assigned:
        score = float(overlaps[r, c])
        if score >= threshold:
            pairs.append((pred[r].id, gt[c].id, score))

    matched_pred = {p for p, _, _ in pairs}
    matched_gt = {g for _, g, _ in pairs}
    return EntityMatching(
        pairs=tuple(pairs),
        unmatched_pred=frozenset(e.id for e in pred if e.id not in matched_pred),
        unmatched_gt=frozenset(e.id for e in gt if e.id not in matched_gt),
    )
