"""Dual-state recurrence, history recap, attention prediction, and losses.

The batched forward pass is checked against a step-by-step reference built
from the public single-sequence pieces (recap_history, interaction_predict,
step_state), and all parameter gradients against finite differences.
"""

import math

import numpy as np
import pytest
import torch
from torch import nn

from apgkt.model import (
    APGKTModel,
    DKTBaseline,
    bce_loss,
    higher_order_state,
    interaction_predict,
    recap_history,
    total_loss,
)
from apgkt.modes import mode_matrix
from apgkt.skillgraph import build_skill_graph
from tests.gradcheck import max_relative_gradient_error

TOY_SKILLS = [frozenset({0, 1}), frozenset({0, 1}), frozenset({0, 2}), frozenset({2})]


def toy_model(seed=41, variant="apgkt", recap="soft", k=5, att_bound=-1e6,
              d=4, d_m=4, n_layers=2, double=True):
    torch.manual_seed(seed)
    qs = np.zeros((len(TOY_SKILLS), 3), dtype=np.int64)
    for q, skills in enumerate(TOY_SKILLS):
        qs[q, sorted(skills)] = 1
    ss = build_skill_graph(qs).ss
    diff = np.array([0.3, 0.6, 0.1])
    mode_mat = mode_matrix(TOY_SKILLS, ss, diff, 2)
    model = APGKTModel(
        n_q=len(TOY_SKILLS), n_s=3, question_skills=TOY_SKILLS, mode_mat=mode_mat,
        d=d, d_m=d_m, n_layers=n_layers, k=k, att_bound=att_bound,
        recap=recap, variant=variant,
    )
    return model.double() if double else model


def reference_forward(model, questions, answers):
    """Single-sequence forward built from the contract-level pieces."""
    q_tilde, s_tilde = model.aggregated()
    codes = None
    if model.use_modes:
        codes, _ = model.autoencoder(model.mode_mat.to(model.dtype))
    state = model.initial_state(1)
    history = []
    preds = []
    for q, a in zip(questions, answers):
        recap = recap_history(
            q, history[:-1], model.recap, model.k, model.att_bound,
            question_skills=model.question_skills, q_tilde=q_tilde.detach(),
        )
        f_i = torch.cat([state.hoc_proj, recap.states])
        skill_rows = s_tilde[sorted(model.question_skills[q])]
        f_j = torch.cat([q_tilde[q].unsqueeze(0), skill_rows])
        preds.append(
            interaction_predict(
                f_i, f_j, model.attention.weight[0], model.attention.bias[0]
            )
        )
        mode_emb = codes[q].unsqueeze(0) if codes is not None else None
        state = model.step_state(
            state, q_tilde[q].unsqueeze(0), mode_emb, torch.tensor([a])
        )
        history.append((q, state.hoc_proj[0]))
    return torch.stack(preds)


class TestHigherOrderState:
    def test_concatenation_is_positional(self):
        h = torch.tensor([1.0, 2.0])
        H = torch.tensor([3.0, 4.0])
        assert higher_order_state(h, H).tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_zero_states(self):
        out = higher_order_state(torch.zeros(5), torch.zeros(5))
        assert out.shape == (10,)
        assert torch.all(out == 0)

    def test_prefix_recovers_first_argument(self):
        rng = torch.Generator().manual_seed(42)
        h = torch.rand(6, generator=rng)
        H = torch.rand(6, generator=rng)
        out = higher_order_state(h, H)
        assert torch.equal(out[:6], h)
        assert torch.equal(out[6:], H)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            higher_order_state(torch.zeros(3), torch.zeros(4))


class TestRecapHistory:
    def test_hard_selects_identical_skill_sets(self):
        """History questions with sets {0,1}, {0}, {0,1}; current is {0,1}."""
        skills = [frozenset({0, 1}), frozenset({0})]
        history = [(0, torch.ones(3)), (1, torch.ones(3) * 2), (0, torch.ones(3) * 3)]
        out = recap_history(0, history, "hard", k=5, att_bound=0.5,
                            question_skills=skills)
        assert out.timesteps == [0, 2]
        assert torch.equal(out.states[1], torch.ones(3) * 3)

    def test_soft_top_one(self):
        q_tilde = torch.tensor([[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0]])
        history = [(1, torch.ones(2)), (2, torch.zeros(2))]
        out = recap_history(0, history, "soft", k=1, att_bound=0.0, q_tilde=q_tilde)
        assert out.timesteps == [0]

    def test_soft_threshold_filters(self):
        q_tilde = torch.tensor([[1.0, 0.0], [0.2, 0.0]])
        history = [(1, torch.ones(2))]
        out = recap_history(0, history, "soft", k=5, att_bound=0.5, q_tilde=q_tilde)
        assert out.timesteps == []
        assert out.states.shape[0] == 0

    def test_empty_history(self):
        out = recap_history(0, [], "hard", k=5, att_bound=0.5,
                            question_skills=[frozenset({0})])
        assert out.timesteps == []

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            recap_history(0, [], "fuzzy", k=5, att_bound=0.5)


class TestInteractionPredict:
    def test_singleton_pair_is_logistic_of_inner_product(self):
        f_i = torch.tensor([[0.5, -1.0, 2.0]])
        f_j = torch.tensor([[1.0, 3.0, 0.25]])
        p = interaction_predict(f_i, f_j, torch.rand(6), torch.rand(1)[0])
        expected = torch.sigmoid((f_i * f_j).sum())
        assert p.item() == pytest.approx(expected.item(), abs=1e-7)

    def test_orthogonal_sets_give_half(self):
        f_i = torch.tensor([[1.0, 0.0], [2.0, 0.0]])
        f_j = torch.tensor([[0.0, 1.0], [0.0, -3.0]])
        p = interaction_predict(f_i, f_j, torch.rand(4), torch.rand(1)[0])
        assert p.item() == pytest.approx(0.5, abs=1e-7)

    def test_matches_pairwise_brute_force(self):
        """Explicit loop over pairs: softmax of scores, logistic of products."""
        rng = torch.Generator().manual_seed(43)
        for _ in range(1000):
            m = int(torch.randint(1, 5, (1,), generator=rng))
            n = int(torch.randint(1, 5, (1,), generator=rng))
            d = int(torch.randint(1, 6, (1,), generator=rng))
            f_i = torch.randn(m, d, generator=rng, dtype=torch.float64)
            f_j = torch.randn(n, d, generator=rng, dtype=torch.float64)
            w = torch.randn(2 * d, generator=rng, dtype=torch.float64)
            b = torch.randn((), generator=rng, dtype=torch.float64)
            p, alpha = interaction_predict(f_i, f_j, w, b, return_alpha=True)
            scores = torch.empty(m, n, dtype=torch.float64)
            for i in range(m):
                for j in range(n):
                    scores[i, j] = w @ torch.cat([f_i[i], f_j[j]]) + b
            expw = torch.exp(scores - scores.max())
            alpha_ref = expw / expw.sum()
            p_ref = (alpha_ref * torch.sigmoid(f_i @ f_j.T)).sum()
            assert abs(alpha.sum().item() - 1.0) < 1e-9
            np.testing.assert_allclose(alpha.numpy(), alpha_ref.numpy(), atol=1e-9)
            assert p.item() == pytest.approx(p_ref.item(), abs=1e-9)
            assert 0.0 < p.item() < 1.0

    def test_masked_pairs_get_zero_weight(self):
        """Masking a row is identical to physically removing it."""
        rng = torch.Generator().manual_seed(99)
        f_i = torch.randn(2, 3, generator=rng, dtype=torch.float64)
        f_j = torch.randn(2, 3, generator=rng, dtype=torch.float64)
        w = torch.randn(6, generator=rng, dtype=torch.float64)
        b = torch.randn((), generator=rng, dtype=torch.float64)
        mask_i = torch.tensor([True, False])
        p_masked, alpha = interaction_predict(
            f_i, f_j, w, b, f_i_mask=mask_i, return_alpha=True
        )
        assert torch.all(alpha[1] == 0)
        p_dropped = interaction_predict(f_i[:1], f_j, w, b)
        assert p_masked.item() == pytest.approx(p_dropped.item(), abs=1e-12)

    def test_empty_sets_rejected(self):
        with pytest.raises(ValueError):
            interaction_predict(torch.zeros(0, 3), torch.zeros(1, 3),
                                torch.zeros(6), torch.zeros(()))


class TestLosses:
    def test_single_step_half_is_ln_two(self):
        loss = bce_loss(torch.tensor([0.5], dtype=torch.float64),
                        torch.tensor([1.0], dtype=torch.float64))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-9)

    def test_perfect_prediction_goes_to_zero(self):
        loss = bce_loss(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0]))
        assert loss.item() == pytest.approx(0.0, abs=1e-5)

    def test_hand_evaluated_pair(self):
        loss = bce_loss(torch.tensor([0.9, 0.1]), torch.tensor([1.0, 0.0]))
        assert loss.item() == pytest.approx(-2 * math.log(0.9), abs=1e-6)

    def test_sums_over_steps(self):
        loss = bce_loss(torch.full((3,), 0.5), torch.ones(3))
        assert loss.item() == pytest.approx(3 * math.log(2), abs=1e-6)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(torch.zeros(2), torch.zeros(3))

    def test_total_loss_arithmetic(self):
        assert total_loss(0.5, 0.25, 1.0) == pytest.approx(0.75)
        assert total_loss(0.5, 0.25, 0.0) == pytest.approx(0.5)
        assert total_loss(0.5, 0.9, 2.0) >= 0.5

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            total_loss(0.5, 0.5, -1.0)


class TestForward:
    def test_shapes_and_probability_range(self):
        model = toy_model()
        B, T = 3, 6
        rng = torch.Generator().manual_seed(44)
        questions = torch.randint(0, 4, (B, T), generator=rng)
        answers = torch.randint(0, 2, (B, T), generator=rng)
        p, reloss = model(questions, answers)
        assert p.shape == (B, T)
        assert torch.all((p > 0) & (p < 1))
        assert reloss.item() >= 0

    @pytest.mark.parametrize("recap", ["soft", "hard"])
    @pytest.mark.parametrize("variant", ["apgkt", "apgkt-no-modes"])
    def test_batched_forward_matches_reference(self, recap, variant):
        """Vectorized recap/attention equals the single-sequence composition."""
        model = toy_model(seed=45, variant=variant, recap=recap, k=2, att_bound=0.0)
        rng = torch.Generator().manual_seed(46)
        B, T = 3, 7
        questions = torch.randint(0, 4, (B, T), generator=rng)
        answers = torch.randint(0, 2, (B, T), generator=rng)
        p, _ = model(questions, answers)
        for b in range(B):
            ref = reference_forward(model, questions[b].tolist(), answers[b].tolist())
            np.testing.assert_allclose(p[b].detach().numpy(), ref.detach().numpy(),
                                       atol=1e-9)

    def test_no_modes_reloss_is_zero(self):
        model = toy_model(variant="apgkt-no-modes")
        rng = torch.Generator().manual_seed(47)
        questions = torch.randint(0, 4, (2, 5), generator=rng)
        answers = torch.randint(0, 2, (2, 5), generator=rng)
        _, reloss = model(questions, answers)
        assert reloss.item() == 0.0

    def test_mode_ablation_equals_zeroed_mode_branch(self):
        """Full model with a silenced mode cell == the no-modes variant."""
        full = toy_model(seed=48, variant="apgkt")
        ablated = toy_model(seed=48, variant="apgkt-no-modes")
        ablated.load_state_dict(full.state_dict())
        with torch.no_grad():
            for p in full.cell_mode.parameters():
                p.zero_()
        rng = torch.Generator().manual_seed(49)
        questions = torch.randint(0, 4, (2, 6), generator=rng)
        answers = torch.randint(0, 2, (2, 6), generator=rng)
        p_full, _ = full(questions, answers)
        p_ablated, reloss = ablated(questions, answers)
        np.testing.assert_allclose(p_full.detach().numpy(),
                                   p_ablated.detach().numpy(), atol=1e-12)
        assert reloss.item() == 0.0

    def test_future_answers_cannot_influence_predictions(self):
        """Flipping every answer from step t on leaves p[:t] bit-identical."""
        model = toy_model(seed=50)
        rng = torch.Generator().manual_seed(51)
        questions = torch.randint(0, 4, (2, 6), generator=rng)
        answers = torch.randint(0, 2, (2, 6), generator=rng)
        p_ref, _ = model(questions, answers)
        for t in range(6):
            flipped = answers.clone()
            flipped[:, t:] = 1 - flipped[:, t:]
            p_alt, _ = model(questions, flipped)
            assert torch.equal(p_alt[:, :t], p_ref[:, :t])

    def test_single_step_cold_start(self):
        model = toy_model(seed=52)
        p, _ = model(torch.tensor([[1]]), torch.tensor([[1]]))
        assert p.shape == (1, 1)
        assert 0 < p.item() < 1

    def test_state_concatenation_positional(self):
        model = toy_model(seed=53)
        state = model.initial_state(2)
        q_tilde, _ = model.aggregated()
        codes, _ = model.autoencoder(model.mode_mat.to(model.dtype))
        q = torch.tensor([1, 2])
        nxt = model.step_state(state, q_tilde[q], codes[q], torch.tensor([1, 0]))
        assert torch.equal(nxt.hoc[:, :4], nxt.h)
        assert torch.equal(nxt.hoc[:, 4:], nxt.H)

    def test_hard_recap_no_match_window(self):
        """A window with zero matching skill sets falls back to state-only f_i."""
        model = toy_model(seed=54, recap="hard")
        questions = torch.tensor([[3, 3, 0]])  # {2}, {2}, then {0,1}: no match
        answers = torch.tensor([[1, 0, 1]])
        p, _ = model(questions, answers)
        assert torch.all((p > 0) & (p < 1))


class TestDKTBaseline:
    def test_shapes_and_range(self):
        torch.manual_seed(55)
        model = DKTBaseline(n_q=5, d=8)
        rng = torch.Generator().manual_seed(56)
        questions = torch.randint(0, 5, (3, 7), generator=rng)
        answers = torch.randint(0, 2, (3, 7), generator=rng)
        p, reloss = model(questions, answers)
        assert p.shape == (3, 7)
        assert torch.all((p > 0) & (p < 1))
        assert reloss.item() == 0.0

    def test_no_future_leakage(self):
        torch.manual_seed(57)
        model = DKTBaseline(n_q=5, d=8)
        rng = torch.Generator().manual_seed(58)
        questions = torch.randint(0, 5, (2, 5), generator=rng)
        answers = torch.randint(0, 2, (2, 5), generator=rng)
        p_ref, _ = model(questions, answers)
        flipped = answers.clone()
        flipped[:, 2:] = 1 - flipped[:, 2:]
        p_alt, _ = model(questions, flipped)
        assert torch.equal(p_alt[:, :2], p_ref[:, :2])


class TestGradients:
    def test_end_to_end_matches_finite_differences(self):
        """2 students, 3 steps; every parameter group against central FD."""
        model = toy_model(seed=59, k=10, att_bound=-1e6, d=3, d_m=3, n_layers=1)
        questions = torch.tensor([[0, 1, 2], [2, 0, 3]])
        answers = torch.tensor([[1, 0, 1], [0, 1, 1]])

        def loss_fn():
            p, reloss = model(questions, answers)
            return total_loss(
                bce_loss(p.reshape(-1), answers.reshape(-1).double()), reloss, 1.0
            )

        assert max_relative_gradient_error(model, loss_fn, eps=1e-5) < 1e-3

    def test_recurrent_cells_match_finite_differences(self):
        """State transition alone on a 3-step sequence, tighter tolerance."""
        model = toy_model(seed=60, d=3, d_m=3, n_layers=0)
        cells = nn.ModuleDict(
            {"skill": model.cell_skill, "mode": model.cell_mode,
             "proj": model.hoc_projection}
        )
        q_input = torch.randn(3, 1, 3, dtype=torch.float64)
        m_input = torch.randn(3, 1, 3, dtype=torch.float64)
        answers = torch.tensor([[1], [0], [1]])

        def loss_fn():
            state = model.initial_state(1)
            for t in range(3):
                state = model.step_state(state, q_input[t], m_input[t], answers[t])
            return (state.hoc_proj ** 2).sum()

        assert max_relative_gradient_error(cells, loss_fn, eps=1e-5) < 1e-4
