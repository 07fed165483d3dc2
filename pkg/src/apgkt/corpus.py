"""Interaction-log ingestion, question-skill metadata, and deterministic splits.

Canonical on-disk format is a pair of CSV files:

* interaction log, header ``student_id,question_id,correct,position``
* Q-matrix, header ``question_id,skill_ids`` with ``;``-separated skill ids

Question and skill ids are densely re-indexed from 0 on load; the
original-to-dense maps are kept on the log and can be persisted as JSON.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

LOG_HEADER = ["student_id", "question_id", "correct", "position"]
QMATRIX_HEADER = ["question_id", "skill_ids"]


class ParseError(ValueError):
    """A row of an input file could not be parsed."""


class ValidationError(ValueError):
    """Parsed data violates a corpus invariant."""


@dataclass(frozen=True)
class InteractionRecord:
    """One answered question: who, what, which skills, and the outcome."""

    student_id: str
    question_id: int
    skill_ids: frozenset[int]
    correct: int
    position: int


@dataclass
class InteractionLog:
    """Per-student ordered interaction sequences plus question-skill metadata.

    ``question_skills[q]`` is the dense skill-id set of dense question ``q``
    and is the single source of truth for the QS relation; every record's
    ``skill_ids`` equals the entry for its question.
    """

    sequences: dict[str, list[InteractionRecord]]
    question_skills: list[frozenset[int]]
    question_id_map: dict[str, int]
    skill_id_map: dict[str, int]

    @property
    def n_q(self) -> int:
        return len(self.question_skills)

    @property
    def n_s(self) -> int:
        return len(self.skill_id_map)

    @property
    def students(self) -> list[str]:
        return list(self.sequences)

    @property
    def n_students(self) -> int:
        return len(self.sequences)

    @property
    def n_interactions(self) -> int:
        return sum(len(seq) for seq in self.sequences.values())

    @property
    def max_skills_per_question(self) -> int:
        return max(len(s) for s in self.question_skills)

    def records(self):
        for seq in self.sequences.values():
            yield from seq

    def validate(self) -> None:
        """Check the structural invariants; raise ValidationError on the first hit."""
        if not self.sequences:
            raise ValidationError("log has no students")
        for skills in self.question_skills:
            if not skills:
                raise ValidationError("question with empty skill set")
        for sid, seq in self.sequences.items():
            if not seq:
                raise ValidationError(f"student {sid!r} has an empty sequence")
            for pos, rec in enumerate(seq):
                if rec.position != pos:
                    raise ValidationError(
                        f"student {sid!r}: positions must be gap-free from 0, "
                        f"got {rec.position} at index {pos}"
                    )
                if not 0 <= rec.question_id < self.n_q:
                    raise ValidationError(
                        f"student {sid!r}: question id {rec.question_id} out of range"
                    )
                if rec.skill_ids != self.question_skills[rec.question_id]:
                    raise ValidationError(
                        f"student {sid!r}: record skill set disagrees with the "
                        f"Q-matrix row of question {rec.question_id}"
                    )
                if rec.correct not in (0, 1):
                    raise ValidationError(
                        f"student {sid!r}: correctness must be 0 or 1, got {rec.correct}"
                    )


def _dense_order(ids: list[str]) -> list[str]:
    """Deterministic ordering for original ids: numeric when possible, else lexicographic."""
    try:
        return sorted(set(ids), key=lambda x: (0, int(x)))
    except ValueError:
        return sorted(set(ids))


def _read_qmatrix(qs_path: str | Path) -> dict[str, list[str]]:
    qs_path = Path(qs_path)
    if not qs_path.exists():
        raise FileNotFoundError(f"Q-matrix file not found: {qs_path}")
    question_skills: dict[str, list[str]] = {}
    with open(qs_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != QMATRIX_HEADER:
            raise ParseError(f"{qs_path}: expected header {','.join(QMATRIX_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{qs_path}:{lineno}: expected 2 fields, got {len(row)}")
            qid, skill_field = row[0].strip(), row[1].strip()
            if qid in question_skills:
                raise ParseError(f"{qs_path}:{lineno}: duplicate question id {qid!r}")
            skills = [s.strip() for s in skill_field.split(";") if s.strip()]
            if not skills:
                raise ValidationError(
                    f"{qs_path}:{lineno}: question {qid!r} maps to zero skills"
                )
            question_skills[qid] = skills
    if not question_skills:
        raise ValidationError(f"{qs_path}: Q-matrix is empty")
    return question_skills


def load_interactions(log_path: str | Path, qs_path: str | Path) -> InteractionLog:
    """Load the canonical CSV pair into a validated, densely indexed log."""
    log_path = Path(log_path)
    if not log_path.exists():
        raise FileNotFoundError(f"interaction log file not found: {log_path}")
    raw_qs = _read_qmatrix(qs_path)

    question_id_map = {q: i for i, q in enumerate(_dense_order(list(raw_qs)))}
    all_skills = [s for skills in raw_qs.values() for s in skills]
    skill_id_map = {s: i for i, s in enumerate(_dense_order(all_skills))}
    question_skills = [frozenset()] * len(question_id_map)
    for q, skills in raw_qs.items():
        question_skills[question_id_map[q]] = frozenset(skill_id_map[s] for s in skills)

    per_student: dict[str, list[tuple[int, int, int]]] = {}
    with open(log_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != LOG_HEADER:
            raise ParseError(f"{log_path}: expected header {','.join(LOG_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{log_path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, qid, correct_s, pos_s = (f.strip() for f in row)
            if qid not in question_id_map:
                raise ValidationError(
                    f"{log_path}:{lineno}: question {qid!r} missing from the Q-matrix"
                )
            try:
                correct = int(correct_s)
                position = int(pos_s)
            except ValueError as exc:
                raise ParseError(f"{log_path}:{lineno}: {exc}") from None
            if correct not in (0, 1):
                raise ValidationError(
                    f"{log_path}:{lineno}: correctness must be 0 or 1, got {correct}"
                )
            if position < 0:
                raise ValidationError(f"{log_path}:{lineno}: negative position {position}")
            per_student.setdefault(sid, []).append((position, question_id_map[qid], correct))
    if not per_student:
        raise ValidationError(f"{log_path}: no interaction rows")

    sequences: dict[str, list[InteractionRecord]] = {}
    for sid, rows in per_student.items():
        rows.sort(key=lambda r: r[0])
        positions = [r[0] for r in rows]
        if positions != list(range(len(rows))):
            raise ValidationError(
                f"student {sid!r}: positions must be strictly increasing and "
                f"gap-free from 0, got {positions[:5]}..."
            )
        sequences[sid] = [
            InteractionRecord(sid, q, question_skills[q], c, pos)
            for pos, q, c in rows
        ]

    log = InteractionLog(sequences, question_skills, question_id_map, skill_id_map)
    log.validate()
    return log


def save_interactions(log: InteractionLog, log_path: str | Path, qs_path: str | Path) -> None:
    """Write the log back to the canonical CSV pair using original ids."""
    inv_q = {v: k for k, v in log.question_id_map.items()}
    inv_s = {v: k for k, v in log.skill_id_map.items()}
    qs_path = Path(qs_path)
    qs_path.parent.mkdir(parents=True, exist_ok=True)
    with open(qs_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(QMATRIX_HEADER)
        for q in range(log.n_q):
            skills = sorted(log.question_skills[q])
            writer.writerow([inv_q[q], ";".join(inv_s[s] for s in skills)])
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for sid, seq in log.sequences.items():
            for rec in seq:
                writer.writerow([sid, inv_q[rec.question_id], rec.correct, rec.position])


def save_id_maps(log: InteractionLog, path: str | Path) -> None:
    """Persist the original-to-dense id maps as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"questions": log.question_id_map, "skills": log.skill_id_map}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def build_qs_matrix(log: InteractionLog) -> np.ndarray:
    """Binary [n_q, n_s] matrix; entry (i, j) = 1 iff question i involves skill j."""
    qs = np.zeros((log.n_q, log.n_s), dtype=np.int64)
    for q, skills in enumerate(log.question_skills):
        for s in skills:
            qs[q, s] = 1
    return qs


def split_train_test(
    log: InteractionLog, ratio: float, seed: int
) -> tuple[InteractionLog, InteractionLog]:
    """Student-level split: round(ratio * n_students) students go to train.

    Deterministic given ``seed``. Both sides keep the full question/skill
    universe so dense ids stay comparable across the split.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    students = log.students
    n = len(students)
    if n < 2:
        raise ValidationError("need at least 2 students to split")
    n_train = int(np.floor(ratio * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_ids = {students[i] for i in perm[:n_train]}
    train = _subset(log, [s for s in students if s in train_ids])
    test = _subset(log, [s for s in students if s not in train_ids])
    return train, test


def subset_students(log: InteractionLog, student_ids: list[str]) -> InteractionLog:
    """New log containing only the given students; question/skill universe kept."""
    missing = [s for s in student_ids if s not in log.sequences]
    if missing:
        raise KeyError(f"unknown students: {missing[:5]}")
    return InteractionLog(
        sequences={sid: list(log.sequences[sid]) for sid in student_ids},
        question_skills=list(log.question_skills),
        question_id_map=dict(log.question_id_map),
        skill_id_map=dict(log.skill_id_map),
    )


def _subset(log: InteractionLog, student_ids: list[str]) -> InteractionLog:
    return subset_students(log, student_ids)


def filter_multi_skill(log: InteractionLog) -> InteractionLog:
    """Keep only records whose question involves at least two skills.

    Students whose sequences become empty are dropped and question/skill ids
    are re-densified; the id maps are composed so they still point from the
    original ids.
    """
    keep_q = [q for q, skills in enumerate(log.question_skills) if len(skills) >= 2]
    if not keep_q:
        raise ValidationError("no multi-skill questions")
    q_remap = {q: i for i, q in enumerate(keep_q)}
    kept_skills = sorted({s for q in keep_q for s in log.question_skills[q]})
    s_remap = {s: i for i, s in enumerate(kept_skills)}

    question_skills = [
        frozenset(s_remap[s] for s in log.question_skills[q]) for q in keep_q
    ]
    sequences: dict[str, list[InteractionRecord]] = {}
    for sid, seq in log.sequences.items():
        kept = [rec for rec in seq if rec.question_id in q_remap]
        if not kept:
            continue
        sequences[sid] = [
            replace(
                rec,
                question_id=q_remap[rec.question_id],
                skill_ids=question_skills[q_remap[rec.question_id]],
                position=pos,
            )
            for pos, rec in enumerate(kept)
        ]
    if not sequences:
        raise ValidationError("no multi-skill questions")
    return InteractionLog(
        sequences=sequences,
        question_skills=question_skills,
        question_id_map={
            orig: q_remap[dense]
            for orig, dense in log.question_id_map.items()
            if dense in q_remap
        },
        skill_id_map={
            orig: s_remap[dense]
            for orig, dense in log.skill_id_map.items()
            if dense in s_remap
        },
    )


def chunk_sequences(log: InteractionLog, max_len: int) -> InteractionLog:
    """Cut sequences longer than ``max_len`` into consecutive chunks.

    Chunks beyond the first get a ``#<n>`` suffix on the student id and are
    treated as independent sequences; positions restart from 0 per chunk.
    This bounds the recurrent unroll and is applied at training time only.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    sequences: dict[str, list[InteractionRecord]] = {}
    for sid, seq in log.sequences.items():
        for i in range(0, len(seq), max_len):
            chunk_id = sid if i == 0 else f"{sid}#{i // max_len}"
            sequences[chunk_id] = [
                replace(rec, student_id=chunk_id, position=pos)
                for pos, rec in enumerate(seq[i : i + max_len])
            ]
    return InteractionLog(
        sequences=sequences,
        question_skills=list(log.question_skills),
        question_id_map=dict(log.question_id_map),
        skill_id_map=dict(log.skill_id_map),
    )
