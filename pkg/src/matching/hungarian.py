"""
One-to-one assignment of ground truths to queries.

scipy's `linear_sum_assignment` finds an optimum; a second pass makes the
choice among equal-cost optima deterministic: the assignment whose query
list (ordered by GT index) is lexicographically smallest.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from src.errors import MatchingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchAssignment:
    """(query index, gt index) pairs, one per ground truth, ordered by gt index."""

    pairs: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.intp)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.intp)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[q, g] for q, g in self.pairs))


def _tie_tolerance(best: float) -> float:
    return 1e-9 * max(1.0, abs(best))


def _solve(cost: np.ndarray, queries: np.ndarray, gts: np.ndarray) -> tuple[float, np.ndarray]:
    """Optimal cost and the query chosen for each of `gts` using only `queries`."""
    if gts.size == 0:
        return 0.0, np.empty(0, dtype=np.intp)
    sub = cost[np.ix_(queries, gts)]
    rows, cols = linear_sum_assignment(sub.T)
    chosen = np.empty(gts.size, dtype=np.intp)
    chosen[rows] = queries[cols]
    return float(sub[cols, rows].sum()), chosen


def _lexicographic_refine(cost: np.ndarray, assigned: np.ndarray, best: float) -> np.ndarray:
    num_queries, num_gts = cost.shape
    tol = _tie_tolerance(best)
    assigned = assigned.copy()
    fixed_cost = 0.0
    used = np.zeros(num_queries, dtype=bool)
    for g in range(num_gts):
        rest_gts = np.arange(g + 1, num_gts)
        for q in range(assigned[g]):
            if used[q]:
                continue
            # cheap lower bound ignoring injectivity among the remaining gts
            free = ~used
            free[q] = False
            bound = fixed_cost + cost[q, g]
            if rest_gts.size:
                bound += cost[np.ix_(free, rest_gts)].min(axis=0).sum()
            if bound > best + tol:
                continue
            rest_cost, rest_choice = _solve(cost, np.flatnonzero(free), rest_gts)
            if fixed_cost + cost[q, g] + rest_cost <= best + tol:
                assigned[g] = q
                assigned[g + 1 :] = rest_choice
                break
        used[assigned[g]] = True
        fixed_cost += cost[assigned[g], g]
    return assigned


def hungarian(cost: np.ndarray) -> MatchAssignment:
    """
    Minimum-cost injective map from ground truths (columns) to queries (rows).

    Args:
        cost: K x G matrix, K >= G, finite.

    Returns:
        G pairs, one per ground truth. Among optimal assignments, the one with
        the lexicographically smallest query sequence by GT index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {cost.shape}")
    num_queries, num_gts = cost.shape
    if num_gts == 0:
        return MatchAssignment()
    if num_queries < num_gts:
        raise MatchingError(
            f"cannot match {num_gts} ground truths one-to-one with {num_queries} queries"
        )
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix has non-finite entries")

    best, assigned = _solve(cost, np.arange(num_queries), np.arange(num_gts))
    assigned = _lexicographic_refine(cost, assigned, best)
    return MatchAssignment(tuple((int(q), g) for g, q in enumerate(assigned)))
