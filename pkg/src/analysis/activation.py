"""
Query activation statistics.

Under one-to-one matching only the matched query slots get a box loss, so
how often each slot is matched (and how evenly the pattern bank receives
gradient) measures the activation imbalance the pattern bank is meant to
relieve.
"""

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from src.matching import MatchAssignment


def gini(values: Sequence[float] | np.ndarray) -> float:
    """
    Gini coefficient of non-negative values: 0 for a constant vector,
    (n - 1) / n for a one-hot vector of length n, 0 for all zeros.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if x.size and x[0] < 0:
        raise ValueError(f"gini needs non-negative values, got minimum {x[0]}")
    total = x.sum()
    if x.size == 0 or total == 0.0:
        return 0.0
    n = x.size
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * x) / (n * total))


@dataclass
class ActivationStats:
    match_counts: np.ndarray  # K, times each query slot was matched
    pattern_grad_norms: list[np.ndarray]  # per step, m row norms of the pattern gradient
    gini_query_matches: float
    gini_pattern_grads: float | None  # None without a pattern bank
    matched_fraction: float
    pattern_specialization: dict[int, list[float]] | None = None

    @property
    def cumulative_pattern_grad_norms(self) -> np.ndarray | None:
        if not self.pattern_grad_norms:
            return None
        return np.sum(self.pattern_grad_norms, axis=0)

    def to_dict(self) -> dict:
        cumulative = self.cumulative_pattern_grad_norms
        return {
            "matched_fraction": self.matched_fraction,
            "gini_query_matches": self.gini_query_matches,
            "gini_pattern_grads": self.gini_pattern_grads,
            "match_counts": self.match_counts.tolist(),
            "pattern_grad_norms": None if cumulative is None else cumulative.tolist(),
            "pattern_specialization": (
                None
                if self.pattern_specialization is None
                else {str(k): v for k, v in self.pattern_specialization.items()}
            ),
        }


@dataclass
class ActivationTracker:
    """Per-epoch accumulator, fed once per training step."""

    num_queries: int
    num_patterns: int = 0
    num_classes: int = 0
    match_counts: np.ndarray = field(init=False)
    pattern_grad_norms: list[np.ndarray] = field(init=False, default_factory=list)
    _class_mass: np.ndarray = field(init=False)
    _class_hits: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.match_counts = np.zeros(self.num_queries, dtype=np.int64)
        self._class_mass = np.zeros((self.num_classes, self.num_patterns))
        self._class_hits = np.zeros(self.num_classes, dtype=np.int64)

    def record_step(
        self,
        assignments: Sequence[MatchAssignment],
        pattern_grad: np.ndarray | None = None,
    ) -> None:
        """
        Args:
            assignments: the final-layer assignment of every image in the step.
            pattern_grad: m x d gradient of the pattern bank after backward.
        """
        for assignment in assignments:
            if len(assignment):
                np.add.at(self.match_counts, assignment.query_indices, 1)
        if pattern_grad is not None:
            self.pattern_grad_norms.append(np.linalg.norm(pattern_grad, axis=1))

    def record_weights(self, weights: np.ndarray, assignment: MatchAssignment, labels: np.ndarray) -> None:
        """Add the matched queries' pattern weights to their GT class."""
        if not self.num_patterns or not len(assignment):
            return
        classes = np.asarray(labels)[assignment.gt_indices]
        np.add.at(self._class_mass, classes, weights[assignment.query_indices])
        np.add.at(self._class_hits, classes, 1)

    def summary(self, track_specialization: bool = True) -> ActivationStats:
        cumulative = np.sum(self.pattern_grad_norms, axis=0) if self.pattern_grad_norms else None
        specialization = None
        if track_specialization and self.num_patterns:
            specialization = {
                c: (self._class_mass[c] / self._class_hits[c]).tolist()
                for c in range(self.num_classes)
                if self._class_hits[c]
            }
        return ActivationStats(
            match_counts=self.match_counts.copy(),
            pattern_grad_norms=list(self.pattern_grad_norms),
            gini_query_matches=gini(self.match_counts),
            gini_pattern_grads=None if cumulative is None else gini(cumulative),
            matched_fraction=float(np.mean(self.match_counts > 0)) if self.num_queries else 0.0,
            pattern_specialization=specialization,
        )


def record_activation(
    assignments_per_step: Sequence[Sequence[MatchAssignment]],
    pattern_grads_per_step: Sequence[np.ndarray | None],
    num_queries: int,
) -> ActivationStats:
    """Activation statistics of one epoch from its per-step assignments and pattern gradients."""
    if len(pattern_grads_per_step) not in (0, len(assignments_per_step)):
        raise ValueError(
            f"{len(assignments_per_step)} steps of assignments but "
            f"{len(pattern_grads_per_step)} steps of pattern gradients"
        )
    grads = list(pattern_grads_per_step) or [None] * len(assignments_per_step)
    num_patterns = next((g.shape[0] for g in grads if g is not None), 0)
    tracker = ActivationTracker(num_queries=num_queries, num_patterns=num_patterns)
    for assignments, grad in zip(assignments_per_step, grads, strict=True):
        tracker.record_step(assignments, grad)
    return tracker.summary(track_specialization=False)
