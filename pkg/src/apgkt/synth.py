"""Synthetic interaction generator with a known answer process.

Each student has a static per-skill mastery probability. Answering a
question correctly requires both mastering its skills and, with strength
``gamma``, traversing the associative path between them: consecutive pairs
of the question's skills in difficulty order are gated by the ground-truth
transition matrix SS*. With ``gamma = 0`` the path gate is disabled and
correctness depends on mastery alone, which gives an A/B oracle for
whether a model exploits skill-association structure.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import InteractionLog, InteractionRecord, save_interactions
from .modes import difficulty_order
from .skillgraph import build_skill_graph

SS_MODES = ("cooccurrence", "random")


@dataclass
class SynthConfig:
    """Knobs of the generative process; all randomness flows from ``seed``."""

    n_students: int = 200
    n_questions: int = 50
    n_skills: int = 8
    h_min: int = 2
    h_max: int = 3
    seq_len: int = 40
    gamma: float = 1.0
    mastery_low: float = 0.6
    mastery_high: float = 1.0
    ss_mode: str = "cooccurrence"
    # Dirichlet concentration for skill popularity; 0 = uniform. Small values
    # (e.g. 0.3) concentrate co-occurrence on a few partners, which widens the
    # spread of path-gate values across skill combinations.
    skill_concentration: float = 0.0
    # Dirichlet concentration for per-skill partner affinities; 0 = off.
    # Each skill draws a heavy-tailed affinity over partners and a combination
    # is weighted by the product of pairwise affinities inside it, so every
    # skill keeps several frequent partners with very different transition
    # weights — pure pair structure that does not factor over skills.
    # Mutually exclusive with skill_concentration.
    pair_concentration: float = 0.0
    # Probability that the next question keeps the previous question's skill
    # set (topic-block practice); 0 = iid uniform draws.
    block_persistence: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_skills < 2:
            raise ValueError(f"need at least 2 skills, got {self.n_skills}")
        if self.n_students < 1 or self.n_questions < 1 or self.seq_len < 1:
            raise ValueError("students, questions, and sequence length must be >= 1")
        if not 1 <= self.h_min <= self.h_max <= self.n_skills:
            raise ValueError(
                f"need 1 <= h_min <= h_max <= n_skills, got "
                f"{self.h_min}, {self.h_max}, {self.n_skills}"
            )
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.mastery_low <= self.mastery_high <= 1.0:
            raise ValueError("mastery range must satisfy 0 <= low <= high <= 1")
        if self.ss_mode not in SS_MODES:
            raise ValueError(f"ss_mode must be one of {SS_MODES}, got {self.ss_mode!r}")
        if self.skill_concentration < 0:
            raise ValueError(
                f"skill_concentration must be >= 0, got {self.skill_concentration}"
            )
        if not 0.0 <= self.block_persistence <= 1.0:
            raise ValueError(
                f"block_persistence must be in [0, 1], got {self.block_persistence}"
            )
        if self.pair_concentration < 0:
            raise ValueError(
                f"pair_concentration must be >= 0, got {self.pair_concentration}"
            )
        if self.pair_concentration > 0 and self.skill_concentration > 0:
            raise ValueError(
                "skill_concentration and pair_concentration are mutually exclusive"
            )
        if self.pair_concentration > 0:
            n_combos = sum(
                math.comb(self.n_skills, h)
                for h in range(self.h_min, self.h_max + 1)
            )
            if n_combos > 200_000:
                raise ValueError(
                    f"pair_concentration would enumerate {n_combos} skill "
                    "combinations; reduce n_skills or the h range"
                )


def path_gate(
    skills: Sequence[int] | frozenset[int],
    ss_star: np.ndarray,
    difficulty: np.ndarray,
) -> float:
    """Product of SS* transitions along the difficulty-ordered skill path.

    Single-skill questions have an empty path; the empty product is 1.
    """
    ordered = difficulty_order(skills, difficulty)
    gate = 1.0
    for prev, nxt in zip(ordered, ordered[1:]):
        gate *= float(ss_star[prev, nxt])
    return gate


def answer_probability(
    mastery_row: np.ndarray,
    skills: Sequence[int] | frozenset[int],
    ss_star: np.ndarray,
    difficulty: np.ndarray,
    gamma: float,
) -> float:
    """P(correct) = (product of per-skill mastery) * ((1-gamma) + gamma * path gate)."""
    mastery = 1.0
    for s in skills:
        mastery *= float(mastery_row[s])
    return mastery * ((1.0 - gamma) + gamma * path_gate(skills, ss_star, difficulty))


def _assign_skills(
    config: SynthConfig,
    rng: np.random.Generator,
    difficulty: np.ndarray | None = None,
) -> list[frozenset[int]]:
    """Draw each question's skill set; cover every skill when there is room.

    With ``skill_concentration > 0`` skills are drawn with popularity weights
    from a Dirichlet, so a few skills dominate co-occurrence and the implied
    transition weights spread out instead of clustering near 1/(n-1). With
    ``pair_concentration > 0`` each skill keeps its own affinity profile over
    partners (sharper for easier skills), so co-occurrence strength varies per
    pair rather than factoring over the individual skills.
    """
    n = config.n_skills
    if config.pair_concentration > 0:
        if difficulty is None:
            difficulty = np.zeros(n)
        return _assign_skills_by_combo(config, rng, difficulty)
    if config.skill_concentration > 0:
        weights = rng.dirichlet(np.full(n, config.skill_concentration)) + 1e-9
        weights /= weights.sum()
    else:
        weights = None

    def draw(pool: list[int], size: int) -> list[int]:
        if size <= 0:
            return []
        if weights is None:
            picked = rng.choice(pool, size=size, replace=False)
        else:
            p = weights[pool] / weights[pool].sum()
            picked = rng.choice(pool, size=size, replace=False, p=p)
        return list(map(int, picked))

    cover = rng.permutation(n)
    question_skills = []
    for q in range(config.n_questions):
        h = int(rng.integers(config.h_min, config.h_max + 1))
        if q < len(cover):
            must = int(cover[q])
            skills = frozenset([must, *draw([s for s in range(n) if s != must], h - 1)])
        else:
            skills = frozenset(draw(list(range(n)), h))
        question_skills.append(skills)
    return question_skills


def _assign_skills_by_combo(
    config: SynthConfig, rng: np.random.Generator, difficulty: np.ndarray
) -> list[frozenset[int]]:
    """Sample questions from affinity-weighted skill combinations.

    Every skill draws a Dirichlet affinity vector over the other skills.
    Foundational (easier) skills use the sharpest concentration — their
    practice material chains them with a handful of advanced partners — while
    harder skills spread evenly; the ramp spans 1x to 4x the configured
    concentration. A combination is weighted by the geometric mean of the
    directed affinities along its difficulty-ordered chain (the easier skill
    "pulls in" each next-harder one), so pair weights are heavy-tailed and
    keyed to specific partners rather than factoring over skills.
    Single-skill combinations use half the skill's total affinity.
    """
    n = config.n_skills
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(difficulty, kind="stable")] = np.arange(n)
    affinity = np.full((n, n), 1e-12)
    for i in range(n):
        partners = [j for j in range(n) if j != i]
        conc = config.pair_concentration * (1.0 + 3.0 * ranks[i] / max(n - 1, 1))
        # prerequisites point forward: affinity prefers harder partners
        base = np.array([(1.0 + ranks[j]) ** 2 for j in partners])
        base *= (n - 1) / base.sum()
        affinity[i, partners] += rng.dirichlet(conc * base)
    combos = [
        frozenset(c)
        for h in range(config.h_min, config.h_max + 1)
        for c in itertools.combinations(range(n), h)
    ]
    weights = np.empty(len(combos))
    for idx, combo in enumerate(combos):
        if len(combo) == 1:
            # solo drill on a skill is as common, in aggregate, as practicing
            # it with each of its partners
            weights[idx] = affinity[next(iter(combo))].sum() / 2.0
        else:
            chain = difficulty_order(combo, difficulty)
            links = [affinity[a, b] for a, b in zip(chain, chain[1:])]
            weights[idx] = float(np.exp(np.mean(np.log(links))))
    weights /= weights.sum()

    cover = rng.permutation(config.n_skills)
    question_skills = []
    for q in range(config.n_questions):
        if q < len(cover):
            must = int(cover[q])
            eligible = [i for i, c in enumerate(combos) if must in c]
            p = weights[eligible] / weights[eligible].sum()
            pick = int(rng.choice(eligible, p=p))
        else:
            pick = int(rng.choice(len(combos), p=weights))
        question_skills.append(combos[pick])
    return question_skills


def _ground_truth_ss(
    config: SynthConfig,
    question_skills: list[frozenset[int]],
    rng: np.random.Generator,
) -> np.ndarray:
    """Build SS*: co-occurrence-derived (matches what a model can estimate
    from the emitted Q-matrix) or random row-stochastic. Rows with no mass
    are filled uniformly so every row sums to 1; such rows are never read
    by the path gate because their skill co-occurs with nothing.
    """
    n = config.n_skills
    if config.ss_mode == "random":
        ss = rng.dirichlet(np.ones(n - 1), size=n)
        out = np.zeros((n, n))
        for i in range(n):
            out[i, np.arange(n) != i] = ss[i]
        return out
    qs = np.zeros((len(question_skills), n), dtype=np.int64)
    for q, skills in enumerate(question_skills):
        qs[q, sorted(skills)] = 1
    out = build_skill_graph(qs).ss.copy()
    for i in np.flatnonzero(out.sum(axis=1) == 0):
        out[i, np.arange(n) != i] = 1.0 / (n - 1)
    return out


def generate_synthetic(config: SynthConfig) -> tuple[InteractionLog, dict]:
    """Sample a full interaction log plus the ground truth that produced it."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    mastery = rng.uniform(
        config.mastery_low, config.mastery_high, size=(config.n_students, config.n_skills)
    )
    difficulty = 1.0 - mastery.mean(axis=0)
    question_skills = _assign_skills(config, rng, difficulty)
    ss_star = _ground_truth_ss(config, question_skills, rng)

    by_combo: dict[frozenset[int], np.ndarray] = {}
    for q, skills in enumerate(question_skills):
        by_combo.setdefault(skills, []).append(q)  # type: ignore[arg-type]
    by_combo = {c: np.asarray(qs) for c, qs in by_combo.items()}

    def draw_sequence() -> np.ndarray:
        if config.block_persistence == 0:
            return rng.integers(0, config.n_questions, size=config.seq_len)
        questions = np.empty(config.seq_len, dtype=np.int64)
        questions[0] = rng.integers(0, config.n_questions)
        for t in range(1, config.seq_len):
            if rng.random() < config.block_persistence:
                pool = by_combo[question_skills[int(questions[t - 1])]]
                questions[t] = pool[rng.integers(0, len(pool))]
            else:
                questions[t] = rng.integers(0, config.n_questions)
        return questions

    sequences: dict[str, list[InteractionRecord]] = {}
    for u in range(config.n_students):
        sid = f"st{u:04d}"
        questions = draw_sequence()
        seq = []
        for pos, q in enumerate(map(int, questions)):
            p = answer_probability(
                mastery[u], question_skills[q], ss_star, difficulty, config.gamma
            )
            correct = int(rng.random() < p)
            seq.append(
                InteractionRecord(
                    student_id=sid,
                    question_id=q,
                    skill_ids=question_skills[q],
                    correct=correct,
                    position=pos,
                )
            )
        sequences[sid] = seq

    log = InteractionLog(
        sequences=sequences,
        question_skills=question_skills,
        question_id_map={f"q{j}": j for j in range(config.n_questions)},
        skill_id_map={f"s{j}": j for j in range(config.n_skills)},
    )
    log.validate()
    truth = {
        "config": dataclasses.asdict(config),
        "gamma": config.gamma,
        "ss_star": ss_star.tolist(),
        "mastery": mastery.tolist(),
        "difficulty": difficulty.tolist(),
    }
    return log, truth


def write_synthetic(config: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Emit the canonical CSV pair plus the ground-truth JSON; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log, truth = generate_synthetic(config)
    paths = {
        "log": out_dir / "log.csv",
        "qmatrix": out_dir / "qmatrix.csv",
        "truth": out_dir / "truth.json",
    }
    save_interactions(log, paths["log"], paths["qmatrix"])
    paths["truth"].write_text(
        json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return paths
