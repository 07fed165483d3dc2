"""Co-occurrence graph construction and per-skill difficulty estimates.

The graph builder is checked against a naive double-loop pair counter on
randomized Q-matrices; difficulty against direct tallies over records.
"""

import numpy as np

from apgkt.skillgraph import (
    UNATTEMPTED_DIFFICULTY,
    build_skill_graph,
    skill_difficulty,
)
from tests.test_corpus import make_log, random_log


def brute_force_ss(qs):
    """Independent reimplementation: explicit loops, no linear algebra."""
    n_q, n_s = qs.shape
    counts = np.zeros((n_s, n_s), dtype=np.int64)
    for i in range(n_s):
        for j in range(n_s):
            if i == j:
                continue
            for q in range(n_q):
                if qs[q, i] == 1 and qs[q, j] == 1:
                    counts[i, j] += 1
    ss = np.zeros((n_s, n_s))
    for i in range(n_s):
        total = counts[i].sum()
        if total > 0:
            for j in range(n_s):
                ss[i, j] = counts[i, j] / total
    return counts, ss


def brute_force_difficulty(log, n_s):
    diff = np.full(n_s, UNATTEMPTED_DIFFICULTY)
    for s in range(n_s):
        attempts = wrong = 0
        for rec in log.records():
            if s in rec.skill_ids:
                attempts += 1
                wrong += 1 - rec.correct
        if attempts > 0:
            diff[s] = wrong / attempts
    return diff


def random_qs(rng, n_q, n_s):
    qs = np.zeros((n_q, n_s), dtype=np.int64)
    for q in range(n_q):
        h = int(rng.integers(1, n_s + 1))
        qs[q, rng.choice(n_s, size=h, replace=False)] = 1
    return qs


class TestBuildSkillGraph:
    def test_three_question_toy(self):
        """Two questions share skills {0,1}, one has {0,2}."""
        qs = np.array([[1, 1, 0], [1, 1, 0], [1, 0, 1]])
        graph = build_skill_graph(qs)
        expected = np.array([[0, 2 / 3, 1 / 3], [1, 0, 0], [1, 0, 0]])
        np.testing.assert_allclose(graph.ss, expected)
        assert graph.cooccurrence_counts[0, 1] == 2
        assert graph.cooccurrence_counts[0, 2] == 1
        assert graph.cooccurrence_counts[1, 2] == 0

    def test_single_skill_questions_give_zero_matrix(self):
        qs = np.eye(4, dtype=np.int64)
        assert build_skill_graph(qs).ss.sum() == 0

    def test_row_sums_are_zero_or_one(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            qs = random_qs(rng, int(rng.integers(1, 21)), int(rng.integers(2, 9)))
            sums = build_skill_graph(qs).ss.sum(axis=1)
            assert np.all((np.abs(sums - 1) < 1e-12) | (sums == 0))

    def test_diagonal_zero_and_entries_in_unit_interval(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            qs = random_qs(rng, int(rng.integers(1, 21)), int(rng.integers(2, 9)))
            ss = build_skill_graph(qs).ss
            assert np.all(np.diag(ss) == 0)
            assert np.all((ss >= 0) & (ss <= 1))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            qs = random_qs(rng, int(rng.integers(1, 21)), int(rng.integers(2, 9)))
            graph = build_skill_graph(qs)
            counts, ss = brute_force_ss(qs)
            np.testing.assert_array_equal(graph.cooccurrence_counts, counts)
            np.testing.assert_array_equal(graph.ss, ss)

    def test_invariant_to_question_order(self):
        rng = np.random.default_rng(14)
        qs = random_qs(rng, 15, 6)
        shuffled = qs[rng.permutation(15)]
        np.testing.assert_array_equal(
            build_skill_graph(qs).ss, build_skill_graph(shuffled).ss
        )

    def test_asymmetry_possible(self):
        """SS[i,j] and SS[j,i] come from different row normalizations."""
        qs = np.array([[1, 1, 0], [1, 0, 1]])
        ss = build_skill_graph(qs).ss
        assert ss[0, 1] == 0.5
        assert ss[1, 0] == 1.0


class TestSkillDifficulty:
    def test_direct_count(self):
        """Skill 0 attempted 4 times with 1 wrong answer."""
        log = make_log({"u": [(0, 1), (0, 1), (0, 0), (0, 1)]}, [{0}])
        qs = np.array([[1]])
        np.testing.assert_allclose(skill_difficulty(log, qs), [0.25])

    def test_all_correct_gives_zero(self):
        log = make_log({"u": [(0, 1), (1, 1)]}, [{0, 1}, {1}])
        qs = np.array([[1, 1], [0, 1]])
        np.testing.assert_array_equal(skill_difficulty(log, qs), [0.0, 0.0])

    def test_unattempted_skill_fallback(self):
        log = make_log({"u": [(0, 0)]}, [{0}, {1}])
        qs = np.array([[1, 0], [0, 1]])
        diff = skill_difficulty(log, qs)
        assert diff[0] == 1.0
        assert diff[1] == UNATTEMPTED_DIFFICULTY

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(15)
        for _ in range(1000):
            log = random_log(
                rng,
                n_students=int(rng.integers(1, 5)),
                n_q=int(rng.integers(1, 8)),
                n_s=int(rng.integers(2, 6)),
                seq_len=int(rng.integers(1, 10)),
            )
            qs = np.zeros((log.n_q, log.n_s), dtype=np.int64)
            for q, skills in enumerate(log.question_skills):
                qs[q, sorted(skills)] = 1
            np.testing.assert_array_equal(
                skill_difficulty(log, qs), brute_force_difficulty(log, log.n_s)
            )

    def test_invariant_to_student_relabeling(self):
        rng = np.random.default_rng(16)
        log = random_log(rng)
        qs = np.zeros((log.n_q, log.n_s), dtype=np.int64)
        for q, skills in enumerate(log.question_skills):
            qs[q, sorted(skills)] = 1
        relabeled = make_log({}, [])
        relabeled.question_skills = log.question_skills
        relabeled.question_id_map = log.question_id_map
        relabeled.skill_id_map = log.skill_id_map
        relabeled.sequences = {
            f"renamed-{i}": seq for i, seq in enumerate(log.sequences.values())
        }
        np.testing.assert_array_equal(
            skill_difficulty(log, qs), skill_difficulty(relabeled, qs)
        )
