"""Maximum-weight bipartite assignment with an optional score threshold.

Matrices are rectangular: an assignment always has min(rows, cols)
matches. Ties between equally scored assignments are broken by returning
the lexicographically smallest match set, so outputs are reproducible.
The threshold variant filters *after* solving: optimal matches scoring
below the threshold are dropped and their rows/columns report as
unmatched, which is what lets a low-similarity detection open a new
chain instead of being forced onto an existing one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError


class Match(NamedTuple):
    row: int
    col: int
    score: float


@dataclass(frozen=True)
class ScoreMatrix:
    """A rows x cols matrix of finite similarity scores."""

    rows: int
    cols: int
    scores: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "scores", tuple(tuple(float(v) for v in row) for row in self.scores)
        )
        if self.rows < 0 or self.cols < 0:
            raise ValidationError("matrix_shape", "matrix dimensions must be >= 0")
        if len(self.scores) != self.rows:
            raise ValidationError("matrix_shape", f"expected {self.rows} rows")
        for row in self.scores:
            if len(row) != self.cols:
                raise ValidationError("matrix_shape", f"expected {self.cols} columns")
            for v in row:
                if not math.isfinite(v):
                    raise ValidationError("non_finite_score", f"non-finite score {v}")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], cols: int | None = None) -> "ScoreMatrix":
        rows = [tuple(r) for r in rows]
        if cols is None:
            cols = len(rows[0]) if rows else 0
        return cls(rows=len(rows), cols=cols, scores=tuple(rows))


@dataclass(frozen=True)
class Assignment:
    """One-to-one matches plus the rows and columns left unmatched."""

    matches: tuple[Match, ...]
    unmatched_rows: tuple[int, ...]
    unmatched_cols: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "matches", tuple(Match(*m) for m in self.matches))
        object.__setattr__(self, "unmatched_rows", tuple(self.unmatched_rows))
        object.__setattr__(self, "unmatched_cols", tuple(self.unmatched_cols))
        rows = [m.row for m in self.matches] + list(self.unmatched_rows)
        cols = [m.col for m in self.matches] + list(self.unmatched_cols)
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ValidationError("not_one_to_one", "rows/cols must appear exactly once")

    @property
    def total_score(self) -> float:
        return float(sum(m.score for m in self.matches))

    def match_for_row(self, row: int) -> Match | None:
        for m in self.matches:
            if m.row == row:
                return m
        return None


def _optimum(scores: np.ndarray, skip_rows: set[int], skip_cols: set[int]) -> Fraction:
    """Exact optimal total over the submatrix with the given rows/cols removed."""
    rows = [r for r in range(scores.shape[0]) if r not in skip_rows]
    cols = [c for c in range(scores.shape[1]) if c not in skip_cols]
    if not rows or not cols:
        return Fraction(0)
    sub = scores[np.ix_(rows, cols)]
    rr, cc = linear_sum_assignment(sub, maximize=True)
    return sum((Fraction(float(sub[r, c])) for r, c in zip(rr, cc)), Fraction(0))


def solve(matrix: ScoreMatrix) -> Assignment:
    """Maximum-weight assignment of size min(rows, cols).

    Among equally scored optima the lexicographically smallest match set
    (compared as a sorted list of (row, col) pairs) is returned. Scores
    are compared in exact rational arithmetic, so ties are never decided
    by accumulated rounding.
    """
    q, p = matrix.rows, matrix.cols
    if q == 0 or p == 0:
        return Assignment(matches=(), unmatched_rows=tuple(range(q)), unmatched_cols=tuple(range(p)))

    scores = np.array(matrix.scores, dtype=float)
    rr, cc = linear_sum_assignment(scores, maximize=True)
    best_total = sum((Fraction(matrix.scores[r][c]) for r, c in zip(rr, cc)), Fraction(0))
    size = min(q, p)

    # Fix cells greedily in lexicographic (row, col) order; a cell is kept
    # when some optimal assignment extends the cells fixed so far plus it.
    fixed: list[tuple[int, int]] = []
    fixed_rows: set[int] = set()
    fixed_cols: set[int] = set()
    fixed_total = Fraction(0)
    for r in range(q):
        if len(fixed) == size:
            break
        for c in range(p):
            if c in fixed_cols:
                continue
            cand_total = fixed_total + Fraction(matrix.scores[r][c])
            rest = _optimum(scores, fixed_rows | {r}, fixed_cols | {c})
            if cand_total + rest == best_total:
                fixed.append((r, c))
                fixed_rows.add(r)
                fixed_cols.add(c)
                fixed_total = cand_total
                break

    matches = tuple(Match(r, c, matrix.scores[r][c]) for r, c in fixed)
    return Assignment(
        matches=matches,
        unmatched_rows=tuple(r for r in range(q) if r not in fixed_rows),
        unmatched_cols=tuple(c for c in range(p) if c not in fixed_cols),
    )


def solve_with_threshold(matrix: ScoreMatrix, tau: float) -> Assignment:
    """`solve`, then drop every match scoring below `tau`.

    Dropped matches return their row and column to the unmatched sets.
    Filtering happens after the optimal assignment is found, not by
    masking the matrix first.
    """
    base = solve(matrix)
    kept = tuple(m for m in base.matches if m.score >= tau)
    dropped = [m for m in base.matches if m.score < tau]
    unmatched_rows = sorted(list(base.unmatched_rows) + [m.row for m in dropped])
    unmatched_cols = sorted(list(base.unmatched_cols) + [m.col for m in dropped])
    return Assignment(
        matches=kept,
        unmatched_rows=tuple(unmatched_rows),
        unmatched_cols=tuple(unmatched_cols),
    )
