"""Rank units by score and cut the sample into K equal-size groups.

Group K collects the largest scores (highest treatment priority). Ties are
broken by original row index via a stable sort, which keeps the assignment
deterministic even for degenerate scoring rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = ["GroupAssignment", "assign_groups", "group_indicator"]


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)  # private copy, caller's array untouched
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GroupAssignment:
    """Per-unit group index in {1..K} plus the K-1 estimated cutoffs.

    The cutoff below group k+1 is the (n k / K)-th smallest score, so each
    group holds exactly n/K units and the cutoff vector is nondecreasing.
    """

    group_of: np.ndarray
    cutoffs: np.ndarray
    K: int

    def __post_init__(self):
        object.__setattr__(
            self, "group_of", _frozen(self.group_of, np.int64)
        )
        object.__setattr__(
            self, "cutoffs", _frozen(self.cutoffs)
        )

    @property
    def n(self) -> int:
        return len(self.group_of)


def assign_groups(scores: np.ndarray, K: int) -> GroupAssignment:
    """Sort by score (stable, ascending) and deal ranks into K groups.

    Rank positions ((k-1) n/K, k n/K] form group k; group K therefore
    contains the top scores.
    """
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    if n == 0:
        raise ValidationError("cannot assign groups on an empty score vector")
    if K < 1:
        raise ValidationError(f"group count must be positive, got {K}")
    if n % K:
        raise ValidationError(f"group count K={K} must divide the sample size n={n}")
    per_group = n // K
    order = np.argsort(scores, kind="stable")
    group_of = np.empty(n, dtype=np.int64)
    group_of[order] = np.arange(n) // per_group + 1
    sorted_scores = scores[order]
    cutoffs = sorted_scores[per_group * np.arange(1, K) - 1]
    return GroupAssignment(group_of=group_of, cutoffs=cutoffs, K=K)


def group_indicator(g: GroupAssignment, k: int) -> np.ndarray:
    """0/1 membership vector of group k; over k these partition the sample."""
    if not 1 <= k <= g.K:
        raise ValidationError(f"group index {k} outside 1..{g.K}")
    return (g.group_of == k).astype(np.int64)
