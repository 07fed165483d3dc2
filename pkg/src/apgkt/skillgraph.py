"""Latent skills graph from co-occurrence statistics, plus per-skill difficulty.

The association strength from skill i to skill j is the number of questions
whose skill set contains both, normalized by i's total co-occurrence count.
Rows are therefore stochastic wherever any co-occurrence exists; the matrix
is deliberately asymmetric (i->j and j->i are normalized differently).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import InteractionLog

UNATTEMPTED_DIFFICULTY = 0.5


@dataclass
class SkillsGraph:
    """Row-normalized co-occurrence matrix ``ss`` and its raw counts."""

    ss: np.ndarray
    cooccurrence_counts: np.ndarray

    @property
    def n_s(self) -> int:
        return self.ss.shape[0]


def build_skill_graph(qs: np.ndarray) -> SkillsGraph:
    """Construct the skills graph from a binary [n_q, n_s] question-skill matrix.

    counts[i, j] = number of questions containing both skills (diagonal
    forced to 0: a skill does not co-occur with itself). Rows with no
    co-occurrence at all stay all-zero rather than uniform.
    """
    qs = np.asarray(qs)
    if qs.ndim != 2:
        raise ValueError(f"QS matrix must be 2-D, got shape {qs.shape}")
    qs = (qs != 0).astype(np.int64)
    counts = qs.T @ qs
    np.fill_diagonal(counts, 0)
    row_sums = counts.sum(axis=1, keepdims=True)
    ss = np.divide(
        counts, row_sums, out=np.zeros(counts.shape, dtype=np.float64),
        where=row_sums > 0,
    )
    return SkillsGraph(ss=ss, cooccurrence_counts=counts)


def skill_difficulty(train_log: InteractionLog, qs: np.ndarray) -> np.ndarray:
    """Wrong-answer rate per skill over the training interactions.

    diff[i] = (# incorrect answers on questions involving skill i) /
    (# answers on questions involving skill i). Skills never attempted in
    the training split fall back to 0.5 (maximal uncertainty).
    """
    qs = np.asarray(qs)
    n_s = qs.shape[1]
    attempts = np.zeros(n_s, dtype=np.int64)
    wrong = np.zeros(n_s, dtype=np.int64)
    for rec in train_log.records():
        for s in rec.skill_ids:
            attempts[s] += 1
            if rec.correct == 0:
                wrong[s] += 1
    diff = np.full(n_s, UNATTEMPTED_DIFFICULTY, dtype=np.float64)
    seen = attempts > 0
    diff[seen] = wrong[seen] / attempts[seen]
    return diff


def export_matrix_csv(matrix: np.ndarray, path: str | Path) -> None:
    """Row-major full-precision decimal CSV, for inspection and reports."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, matrix, delimiter=",", fmt="%.17g")
