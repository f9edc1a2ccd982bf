"""Dataset container, CSV ingestion, divisibility checks and fold splitting.

All containers are frozen dataclasses whose arrays are marked read-only, so
instances are safe to share across threads; every operation here is pure
apart from the file I/O in load/save.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError
from .numerics import RngStream

__all__ = [
    "ExperimentDataset",
    "FoldAssignment",
    "load_dataset",
    "save_dataset",
    "validate_for_gates",
    "split_folds",
]


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)  # private copy, caller's array untouched
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ExperimentDataset:
    """One completely randomized sample: outcomes, binary treatments, and
    optionally a score per unit and a covariate matrix.

    Row order is preserved from ingestion; it is the tie-break key when
    units are ranked by score downstream.
    """

    y: np.ndarray
    t: np.ndarray
    score: np.ndarray | None = None
    x: np.ndarray | None = None
    x_names: tuple[str, ...] | None = None

    def __post_init__(self):
        y = _frozen(self.y, float)
        t_raw = np.asarray(self.t)
        if not np.isin(t_raw, (0, 1)).all():
            bad = int(np.flatnonzero(~np.isin(t_raw, (0, 1)))[0])
            raise ValidationError(
                f"treatment indicator must be 0 or 1; row {bad} has {t_raw[bad]!r}"
            )
        t = _frozen(t_raw, np.int64)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        if len(y) != len(t):
            raise ValidationError(f"y has {len(y)} rows but t has {len(t)}")
        if not np.isfinite(y).all():
            bad = int(np.flatnonzero(~np.isfinite(y))[0])
            raise ValidationError(f"outcome is not finite at row {bad}")
        if self.score is not None:
            score = _frozen(self.score, float)
            if len(score) != len(y):
                raise ValidationError(
                    f"score has {len(score)} rows but the dataset has {len(y)}"
                )
            if not np.isfinite(score).all():
                bad = int(np.flatnonzero(~np.isfinite(score))[0])
                raise ValidationError(f"score is not finite at row {bad}")
            object.__setattr__(self, "score", score)
        if self.x is not None:
            x = _frozen(np.atleast_2d(self.x), float)
            if x.shape[0] != len(y):
                raise ValidationError(
                    f"covariate matrix has {x.shape[0]} rows but the dataset has {len(y)}"
                )
            if not np.isfinite(x).all():
                raise ValidationError("covariate matrix contains non-finite entries")
            object.__setattr__(self, "x", x)
            if self.x_names is not None:
                names = tuple(self.x_names)
                if len(names) != x.shape[1]:
                    raise ValidationError(
                        f"{len(names)} covariate names for {x.shape[1]} columns"
                    )
                object.__setattr__(self, "x_names", names)
        if self.n1 < 1 or self.n0 < 1:
            raise ValidationError(
                f"both arms must be populated, got n1={self.n1}, n0={self.n0}"
            )

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n1(self) -> int:
        return int(self.t.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    def subset(self, idx: np.ndarray) -> "ExperimentDataset":
        """New dataset with the selected rows, original order preserved."""
        idx = np.asarray(idx)
        return ExperimentDataset(
            y=self.y[idx],
            t=self.t[idx],
            score=None if self.score is None else self.score[idx],
            x=None if self.x is None else self.x[idx],
            x_names=self.x_names,
        )

    def with_score(self, score: np.ndarray) -> "ExperimentDataset":
        return ExperimentDataset(
            y=self.y, t=self.t, score=score, x=self.x, x_names=self.x_names
        )


@dataclass(frozen=True)
class FoldAssignment:
    """Stratified fold labels: every fold holds exactly m1 treated and m0
    control units."""

    fold_of: np.ndarray
    L: int
    m: int
    m1: int
    m0: int

    def __post_init__(self):
        object.__setattr__(self, "fold_of", _frozen(self.fold_of, np.int64))

    def members(self, fold: int) -> np.ndarray:
        """Row indices of one fold, in original dataset order."""
        return np.flatnonzero(self.fold_of == fold)


_DEFAULT_SCHEMA = {"y": "y", "t": "t", "score": "score", "x": None}


def load_dataset(path, schema: Mapping[str, object] | None = None) -> ExperimentDataset:
    """Read a header-row CSV into an ExperimentDataset.

    Parameters
    ----------
    path : file path
    schema : mapping, optional
        Column mapping with keys "y", "t", "score", "x". "score" may be
        None (no score column); when left at the default "score" the column
        is used only if present. "x" is a sequence of covariate column
        names or None.

    Raises
    ------
    SchemaError        if a requested column is absent.
    ValidationError    if a treatment cell is not 0/1.
    ParseError         if a cell is non-numeric (the message names the row).
    """
    merged = dict(_DEFAULT_SCHEMA)
    explicit_score = schema is not None and "score" in schema
    if schema:
        merged.update(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    col_index = {name: i for i, name in enumerate(header)}

    def require(col: str, what: str) -> int:
        if col not in col_index:
            raise SchemaError(f"{path}: missing required column {col!r} (for {what})")
        return col_index[col]

    y_col = require(str(merged["y"]), "outcome")
    t_col = require(str(merged["t"]), "treatment")
    score_name = merged["score"]
    if score_name is None:
        score_col = None
    elif explicit_score or score_name in col_index:
        score_col = require(str(score_name), "score")
    else:
        score_col = None
    x_names: Sequence[str] | None = merged["x"]  # type: ignore[assignment]
    x_cols = [require(str(c), "covariate") for c in x_names] if x_names else None

    def cell(row_i: int, row: list[str], j: int) -> float:
        raw = row[j].strip() if j < len(row) else ""
        if raw == "":
            raise ParseError(f"{path}: empty cell in column {header[j]!r} at data row {row_i}")
        try:
            return float(raw)
        except ValueError:
            raise ParseError(
                f"{path}: non-numeric value {raw!r} in column {header[j]!r} at data row {row_i}"
            ) from None

    n = len(rows)
    y = np.empty(n)
    t = np.empty(n, dtype=np.int64)
    score = np.empty(n) if score_col is not None else None
    x = np.empty((n, len(x_cols))) if x_cols else None
    for i, row in enumerate(rows, start=1):
        y[i - 1] = cell(i, row, y_col)
        t_val = cell(i, row, t_col)
        if t_val not in (0.0, 1.0):
            raise ValidationError(
                f"{path}: treatment must be 0 or 1, got {t_val!r} at data row {i}"
            )
        t[i - 1] = int(t_val)
        if score is not None:
            score[i - 1] = cell(i, row, score_col)  # type: ignore[arg-type]
        if x is not None:
            for jj, j in enumerate(x_cols):  # type: ignore[union-attr]
                x[i - 1, jj] = cell(i, row, j)
    return ExperimentDataset(
        y=y, t=t, score=score, x=x, x_names=tuple(x_names) if x_names else None
    )


def save_dataset(d: ExperimentDataset, path) -> None:
    """Write a dataset back to CSV; floats are written with repr so a
    load/save round trip preserves every bit."""
    path = Path(path)
    header = ["y", "t"]
    if d.score is not None:
        header.append("score")
    if d.x is not None:
        header.extend(d.x_names or [f"x{j}" for j in range(d.x.shape[1])])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(d.n):
            row: list[object] = [repr(float(d.y[i])), int(d.t[i])]
            if d.score is not None:
                row.append(repr(float(d.score[i])))
            if d.x is not None:
                row.extend(repr(float(v)) for v in d.x[i])
            writer.writerow(row)


def validate_for_gates(
    d: ExperimentDataset, K: int, trim: bool = False
) -> ExperimentDataset:
    """Check that K divides both arm sizes.

    In strict mode (default) a violation raises. With trim=True the
    highest-index units of each over-full arm are dropped until both arms
    are divisible, deterministically, and the subsample is returned.
    """
    if K < 2:
        raise ValidationError(f"group count must be at least 2, got {K}")
    r1, r0 = d.n1 % K, d.n0 % K
    if r1 == 0 and r0 == 0:
        return d
    if not trim:
        raise ValidationError(
            f"group count K={K} must divide both arm sizes, got n1={d.n1}, n0={d.n0}"
        )
    keep = np.ones(d.n, dtype=bool)
    if r1:
        keep[np.flatnonzero(d.t == 1)[-r1:]] = False
    if r0:
        keep[np.flatnonzero(d.t == 0)[-r0:]] = False
    return d.subset(np.flatnonzero(keep))


# Default substream for fold splitting when a bare integer seed is given;
# keeps the split independent of other consumers of the same seed.
_SPLIT_STREAM_ID = 101


def split_folds(d: ExperimentDataset, L: int, seed) -> FoldAssignment:
    """Uniformly random stratified split into L folds of equal size.

    Treated units are permuted and dealt m1 = n1/L per fold, control units
    likewise; deterministic given the seed (an integer or an RngStream).
    """
    if L < 2:
        raise ValidationError(f"fold count must be at least 2, got {L}")
    if d.n1 % L or d.n0 % L:
        raise ValidationError(
            f"fold count L={L} must divide both arm sizes, got n1={d.n1}, n0={d.n0}"
        )
    m1, m0 = d.n1 // L, d.n0 // L
    rng = seed if isinstance(seed, RngStream) else RngStream(seed, _SPLIT_STREAM_ID)
    gen = rng.generator()
    fold_of = np.empty(d.n, dtype=np.int64)
    for arm, per_fold in ((1, m1), (0, m0)):
        idx = np.flatnonzero(d.t == arm)
        perm = gen.permutation(idx)
        for ell in range(L):
            fold_of[perm[ell * per_fold : (ell + 1) * per_fold]] = ell + 1
    return FoldAssignment(fold_of=fold_of, L=L, m=d.n // L, m1=m1, m0=m0)
