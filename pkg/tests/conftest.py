import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sgates import ExperimentDataset

D8_Y = np.array([1.0, 2.0, 3.0, 4.0, 10.0, 12.0, 14.0, 16.0])
D8_T = np.array([1, 0, 1, 0, 1, 0, 1, 0])
D8_SCORES = np.arange(10.0, 90.0, 10.0)


@pytest.fixture
def d8():
    """Eight units, alternating treatment, scores 10..80."""
    return ExperimentDataset(y=D8_Y, t=D8_T, score=D8_SCORES)


def random_dataset(rng, n=None, K=2, with_x=False):
    """Small random dataset with at least two units per (group, arm) cell,
    built by interleaving arms within each score-ordered block."""
    if n is None:
        n = 4 * K
    per = n // K
    t = np.tile([1, 0], n // 2)
    y = rng.normal(size=n).round(6)
    scores = rng.normal(size=n).round(6)
    x = rng.normal(size=(n, 3)).round(6) if with_x else None
    order = np.argsort(scores, kind="stable")
    t_sorted = np.empty(n, dtype=int)
    for b in range(K):
        block = order[b * per : (b + 1) * per]
        t_sorted[block] = np.tile([1, 0], per // 2 + 1)[:per]
    return ExperimentDataset(y=y, t=t_sorted, score=scores, x=x)
