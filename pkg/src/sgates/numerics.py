"""Numerical kernels shared by the estimators, tests and simulations.

Special functions are thin wrappers over scipy that pin down the domain
conventions the rest of the package relies on (notably the step-function
degeneration of the regularized incomplete beta at nonpositive shape).
Random sampling goes through counter-based Philox substreams, so any number
of streams can be consumed in any order, on any number of threads, with
bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as _slinalg
from scipy import special as _special

from .errors import ComputationError

__all__ = [
    "DEFAULT_PD_FLOOR",
    "RngStream",
    "reg_incomplete_beta",
    "chi2_sf",
    "normal_quantile",
    "mvn_sample",
    "psd_cholesky",
    "solve_spd",
    "least_squares",
]

DEFAULT_PD_FLOOR = 1e-10


@dataclass(frozen=True)
class RngStream:
    """Address of one Philox substream, identified by (seed, stream_id).

    Distinct stream ids under the same seed give statistically independent
    streams, and the output of a stream never depends on how much any other
    stream has consumed.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.seed % (1 << 64), self.stream_id % (1 << 64)], dtype=np.uint64
        )
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, stream_id: int) -> "RngStream":
        """Sibling stream under the same seed."""
        return RngStream(self.seed, stream_id)


def reg_incomplete_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_x(a, b).

    For a <= 0 (with b > 0) the underlying Beta law degenerates to a point
    mass at zero, so the value is the Heaviside step 1{x > 0}.

    Parameters
    ----------
    x : float in [0, 1]
    a : float
        Shape; values <= 0 trigger the step-function convention.
    b : float
        Scale; must be positive.
    """
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if b <= 0.0:
        raise ValueError(f"b must be positive, got {b}")
    if a <= 0.0:
        return 1.0 if x > 0.0 else 0.0
    return float(_special.betainc(a, b, x))


def chi2_sf(x: float, df: int) -> float:
    """Survival function of the chi-squared distribution with df degrees of freedom."""
    if x < 0.0:
        raise ValueError(f"x must be nonnegative, got {x}")
    if df <= 0:
        raise ValueError(f"df must be a positive integer, got {df}")
    return float(_special.chdtrc(df, x))


def normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF on the open interval (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie strictly inside (0, 1), got {p}")
    return float(_special.ndtri(p))


def psd_cholesky(a: np.ndarray, pd_floor: float = DEFAULT_PD_FLOOR) -> np.ndarray:
    """Lower Cholesky factor, retrying once with pd_floor jitter on the diagonal.

    Raises ComputationError if the matrix is still not factorizable after
    the jitter.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(a + pd_floor * np.eye(a.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise ComputationError(
            f"Cholesky factorization failed even after adding {pd_floor} jitter"
        ) from exc


def mvn_sample(
    sigma, count: int, rng: RngStream, pd_floor: float = DEFAULT_PD_FLOOR
) -> np.ndarray:
    """Draw `count` rows from N(0, sigma) using one deterministic substream.

    `sigma` may be a raw matrix or any object with a `.sigma` attribute.
    """
    mat = np.asarray(getattr(sigma, "sigma", sigma), dtype=float)
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    chol = psd_cholesky(mat, pd_floor)
    z = rng.generator().standard_normal((count, mat.shape[0]))
    return z @ chol.T


def solve_spd(a: np.ndarray, b: np.ndarray, pd_floor: float = DEFAULT_PD_FLOOR) -> np.ndarray:
    """Solve a x = b for symmetric positive-definite a via Cholesky."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"dimension mismatch: a is {a.shape}, b has leading {b.shape[0]}")
    chol = psd_cholesky(a, pd_floor)
    return _slinalg.cho_solve((chol, True), b)


def least_squares(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least-squares coefficients of y on the columns of x.

    Returns (coefficients, rank_deficient). On rank deficiency the
    minimal-norm solution is returned and the flag is set.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise ValueError(
            f"dimension mismatch: design has {x.shape[0]} rows, response has {y.shape[0]}"
        )
    if x.shape[1] < 1:
        raise ValueError("design matrix needs at least one column")
    coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    return coef, bool(rank < x.shape[1])
