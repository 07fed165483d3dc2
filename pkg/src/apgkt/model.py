"""Dual recurrent student state, history recap, and attention-based prediction.

Two LSTM branches evolve in parallel: one over the aggregated question
embedding of each answered exercise, one over its mode embedding. Their
hidden states are concatenated (skills state first) into the higher-order
state, projected back to width ``d``, and fed to a generalized interaction
module that attends over pairwise inner products between candidate states
and the current question's embedding plus its skill neighbors.

Prediction at step t uses only the state accumulated through step t-1, so
a label never influences its own prediction (teacher forcing is safe).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .embed import BigraphEncoder, BigraphNeighborhood, EmbeddingTable
from .modes import ModeAutoencoder, reconstruction_loss

PROB_EPS = 1e-7

VARIANTS = ("apgkt", "apgkt-no-modes", "dkt-baseline")


@dataclass
class StudentState:
    """Recurrent state of one batch of students.

    ``hoc`` is positionally [h, H]; ``hoc_proj`` is its learned projection
    to width d. ``c_skill``/``c_mode`` are the LSTM cell memories.
    """

    h: torch.Tensor
    H: torch.Tensor
    c_skill: torch.Tensor
    c_mode: torch.Tensor
    hoc: torch.Tensor
    hoc_proj: torch.Tensor


@dataclass
class RecapSet:
    """History states selected as relevant to the current question."""

    states: torch.Tensor  # [n_selected, d]
    timesteps: list[int]


def higher_order_state(h: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
    """Concatenate the skills state and the mode state, skills first."""
    if h.shape != H.shape:
        raise ValueError(f"state shape mismatch: {tuple(h.shape)} vs {tuple(H.shape)}")
    return torch.cat([h, H], dim=-1)


def recap_history(
    q_t: int,
    history: Sequence[tuple[int, torch.Tensor]],
    mode: str,
    k: int,
    att_bound: float,
    question_skills: Sequence[frozenset[int]] | None = None,
    q_tilde: torch.Tensor | None = None,
) -> RecapSet:
    """Select history states relevant to question ``q_t``.

    ``history`` is a sequence of (question id, projected state) pairs in
    time order. Hard mode keeps steps whose question has a skill set
    identical to the current one; soft mode keeps the top-k steps by inner
    product between aggregated question embeddings, dropping those below
    ``att_bound``. An empty result is valid.
    """
    if mode not in ("hard", "soft"):
        raise ValueError(f"recap mode must be 'hard' or 'soft', got {mode!r}")
    d = q_tilde.shape[-1] if q_tilde is not None else (
        history[0][1].shape[-1] if history else 0
    )
    empty = RecapSet(states=torch.zeros(0, d), timesteps=[])
    if not history:
        return empty
    if mode == "hard":
        if question_skills is None:
            raise ValueError("hard recap needs the question skill sets")
        current = question_skills[q_t]
        keep = [t for t, (q, _) in enumerate(history) if question_skills[q] == current]
    else:
        if q_tilde is None:
            raise ValueError("soft recap needs the aggregated question embeddings")
        with torch.no_grad():
            sims = torch.stack([q_tilde[q] @ q_tilde[q_t] for q, _ in history])
        kk = min(k, len(history))
        vals, idx = torch.topk(sims, kk)
        keep = sorted(int(i) for v, i in zip(vals, idx) if float(v) >= att_bound)
    if not keep:
        return empty
    return RecapSet(states=torch.stack([history[t][1] for t in keep]), timesteps=keep)


def interaction_predict(
    f_i: torch.Tensor,
    f_j: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    f_i_mask: torch.Tensor | None = None,
    f_j_mask: torch.Tensor | None = None,
    return_alpha: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """Attention-weighted mean of squashed pairwise inner products.

    ``f_i`` is [..., m, d] (selected states plus the current higher-order
    projection), ``f_j`` is [..., n, d] (aggregated question plus its skill
    neighbors). Attention logits are ``weight^T [f_i, f_j] + bias`` over all
    pairs, normalized with a softmax across the full cross product; each
    inner product passes through a logistic so the convex combination is a
    probability in (0, 1).
    """
    squeeze = f_i.dim() == 2
    if squeeze:
        f_i, f_j = f_i.unsqueeze(0), f_j.unsqueeze(0)
        f_i_mask = None if f_i_mask is None else f_i_mask.unsqueeze(0)
        f_j_mask = None if f_j_mask is None else f_j_mask.unsqueeze(0)
    if f_i.shape[1] == 0 or f_j.shape[1] == 0:
        raise ValueError("interaction sets must be non-empty")
    d = f_i.shape[-1]
    w_i, w_j = weight[:d], weight[d:]
    scores = (f_i @ w_i).unsqueeze(2) + (f_j @ w_j).unsqueeze(1) + bias  # [B, m, n]
    g = torch.einsum("bmd,bnd->bmn", f_i, f_j)
    if f_i_mask is not None or f_j_mask is not None:
        m_i = (
            f_i_mask if f_i_mask is not None
            else torch.ones(f_i.shape[:2], dtype=torch.bool, device=f_i.device)
        )
        m_j = (
            f_j_mask if f_j_mask is not None
            else torch.ones(f_j.shape[:2], dtype=torch.bool, device=f_j.device)
        )
        pair_mask = m_i.unsqueeze(2) & m_j.unsqueeze(1)
        scores = scores.masked_fill(~pair_mask, float("-inf"))
    B, m, n = scores.shape
    alpha = torch.softmax(scores.reshape(B, m * n), dim=1).reshape(B, m, n)
    p = (alpha * torch.sigmoid(g)).sum(dim=(1, 2))
    if squeeze:
        p, alpha = p.squeeze(0), alpha.squeeze(0)
    return (p, alpha) if return_alpha else p


def bce_loss(predictions: torch.Tensor, answers: torch.Tensor) -> torch.Tensor:
    """Summed cross entropy between predicted probabilities and 0/1 answers.

    Probabilities are clamped away from {0, 1} for numerical safety.
    """
    predictions = torch.as_tensor(predictions)
    answers = torch.as_tensor(answers, dtype=predictions.dtype, device=predictions.device)
    if predictions.shape != answers.shape:
        raise ValueError(
            f"length mismatch: {tuple(predictions.shape)} vs {tuple(answers.shape)}"
        )
    p = predictions.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(answers * torch.log(p) + (1.0 - answers) * torch.log(1.0 - p)).sum()


def total_loss(bce, reloss, lam: float = 1.0):
    """Joint objective: prediction loss plus weighted reconstruction loss."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return bce
    return bce + lam * reloss


class APGKTModel(nn.Module):
    """Full model; ``variant='apgkt-no-modes'`` freezes the mode branch at zero.

    The no-modes variant keeps the same parameter layout (so weights can be
    shared across variants in ablation tests) but never runs the mode cell
    or the autoencoder, and reports a reconstruction loss of exactly 0.
    """

    def __init__(
        self,
        n_q: int,
        n_s: int,
        question_skills: Sequence[frozenset[int]],
        mode_mat: np.ndarray,
        d: int = 100,
        d_m: int = 100,
        n_layers: int = 2,
        neighbor_cap: int = 10,
        k: int = 5,
        att_bound: float = 0.5,
        recap: str = "soft",
        activation: str = "tanh",
        decoder_activation: str = "tanh",
        variant: str = "apgkt",
        neighbor_seed: int = 0,
    ):
        super().__init__()
        if variant not in ("apgkt", "apgkt-no-modes"):
            raise ValueError(f"unsupported variant for this class: {variant!r}")
        if recap not in ("hard", "soft"):
            raise ValueError(f"recap must be 'hard' or 'soft', got {recap!r}")
        self.d = d
        self.d_m = d_m
        self.k = k
        self.att_bound = att_bound
        self.recap = recap
        self.variant = variant
        self.use_modes = variant == "apgkt"
        self.question_skills = [frozenset(s) for s in question_skills]

        self.tables = EmbeddingTable(n_q, n_s, d)
        neighborhood = BigraphNeighborhood(
            self.question_skills, n_s, cap=neighbor_cap, seed=neighbor_seed
        )
        self.encoder = BigraphEncoder(neighborhood, d, n_layers, activation)
        self.autoencoder = ModeAutoencoder(
            mode_mat.shape[1], d_m, activation, decoder_activation
        )
        self.cell_skill = nn.LSTMCell(2 * d, d)
        self.cell_mode = nn.LSTMCell(d_m + d, d)
        self.hoc_projection = nn.Linear(2 * d, d)
        self.attention = nn.Linear(2 * d, 1)

        self.register_buffer("mode_mat", torch.tensor(mode_mat, dtype=torch.float32))
        h_max = max((len(s) for s in self.question_skills), default=1)
        qsk_idx = torch.zeros(n_q, h_max, dtype=torch.long)
        qsk_mask = torch.zeros(n_q, h_max, dtype=torch.bool)
        for q, skills in enumerate(self.question_skills):
            ordered = sorted(skills)
            qsk_idx[q, : len(ordered)] = torch.tensor(ordered, dtype=torch.long)
            qsk_mask[q, : len(ordered)] = True
        self.register_buffer("qskill_idx", qsk_idx)
        self.register_buffer("qskill_mask", qsk_mask)
        # questions with identical skill sets share a signature (hard recap)
        signatures: dict[frozenset[int], int] = {}
        sig = torch.tensor(
            [signatures.setdefault(s, len(signatures)) for s in self.question_skills],
            dtype=torch.long,
        )
        self.register_buffer("skillset_signature", sig)

    @property
    def dtype(self) -> torch.dtype:
        return self.tables.question.weight.dtype

    def initial_state(self, batch_size: int) -> StudentState:
        zeros = torch.zeros(
            batch_size, self.d, dtype=self.dtype,
            device=self.tables.question.weight.device,
        )
        h, H, c1, c2 = zeros, zeros.clone(), zeros.clone(), zeros.clone()
        hoc = higher_order_state(h, H)
        return StudentState(h, H, c1, c2, hoc, self.hoc_projection(hoc))

    def step_state(
        self,
        state: StudentState,
        q_emb: torch.Tensor,
        mode_emb: torch.Tensor | None,
        answers: torch.Tensor,
    ) -> StudentState:
        """Advance both branches with one answered exercise."""
        ans_emb = self.tables.answer(answers)
        h, c_skill = self.cell_skill(
            torch.cat([q_emb, ans_emb], dim=-1), (state.h, state.c_skill)
        )
        if self.use_modes:
            if mode_emb is None:
                raise ValueError("mode embedding required when the mode branch is on")
            H, c_mode = self.cell_mode(
                torch.cat([mode_emb, ans_emb], dim=-1), (state.H, state.c_mode)
            )
        else:
            H, c_mode = state.H, state.c_mode
        hoc = higher_order_state(h, H)
        return StudentState(h, H, c_skill, c_mode, hoc, self.hoc_projection(hoc))

    def aggregated(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encoder(self.tables)

    def _select_history(
        self,
        q_t: torch.Tensor,
        window_q: torch.Tensor,
        window_states: torch.Tensor,
        q_tilde_detached: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor] | None:
        """Vectorized recap over a [B, w] window; returns (states, mask) or None."""
        w = window_q.shape[1]
        if w == 0:
            return None
        if self.recap == "hard":
            match = self.skillset_signature[window_q] == self.skillset_signature[
                q_t
            ].unsqueeze(1)
            kk = int(match.sum(dim=1).max())
            if kk == 0:
                return None
            order = torch.sort(match.int(), dim=1, descending=True, stable=True).indices
            idx = order[:, :kk]
            valid = torch.gather(match, 1, idx)
        else:
            sims = torch.einsum(
                "bwd,bd->bw", q_tilde_detached[window_q], q_tilde_detached[q_t]
            )
            kk = min(self.k, w)
            vals, idx = torch.topk(sims, kk, dim=1)
            valid = vals >= self.att_bound
        states = torch.gather(
            window_states, 1, idx.unsqueeze(-1).expand(-1, -1, self.d)
        )
        return states, valid

    def forward(
        self,
        questions: torch.Tensor,
        answers: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced pass over [B, T] sequences.

        Returns per-step correctness probabilities [B, T] and the mode
        reconstruction loss (exactly 0 for the no-modes variant). ``mask``
        only gates which outputs are meaningful; state updates at padded
        steps never feed an unmasked prediction because padding is a suffix.
        """
        B, T = questions.shape
        q_tilde, s_tilde = self.aggregated()
        q_det = q_tilde.detach()
        if self.use_modes:
            codes, decoded = self.autoencoder(self.mode_mat.to(self.dtype))
            reloss = reconstruction_loss(self.mode_mat.to(self.dtype), decoded)
        else:
            codes = None
            reloss = torch.zeros((), dtype=self.dtype, device=questions.device)

        state = self.initial_state(B)
        history: list[torch.Tensor] = []
        att_w = self.attention.weight[0]
        att_b = self.attention.bias[0]
        preds = []
        for t in range(T):
            q_t = questions[:, t]
            f_i = [state.hoc_proj.unsqueeze(1)]
            f_i_mask = [torch.ones(B, 1, dtype=torch.bool, device=questions.device)]
            if len(history) > 1:
                window_states = torch.stack(history[:-1], dim=1)
                selected = self._select_history(
                    q_t, questions[:, : t - 1], window_states, q_det
                )
                if selected is not None:
                    f_i.append(selected[0])
                    f_i_mask.append(selected[1])
            skill_emb = s_tilde[self.qskill_idx[q_t]]
            f_j = torch.cat([q_tilde[q_t].unsqueeze(1), skill_emb], dim=1)
            f_j_mask = torch.cat(
                [
                    torch.ones(B, 1, dtype=torch.bool, device=questions.device),
                    self.qskill_mask[q_t],
                ],
                dim=1,
            )
            preds.append(
                interaction_predict(
                    torch.cat(f_i, dim=1),
                    f_j,
                    att_w,
                    att_b,
                    torch.cat(f_i_mask, dim=1),
                    f_j_mask,
                )
            )
            mode_emb = codes[q_t] if codes is not None else None
            state = self.step_state(state, q_tilde[q_t], mode_emb, answers[:, t])
            history.append(state.hoc_proj)
        return torch.stack(preds, dim=1), reloss


class DKTBaseline(nn.Module):
    """Plain recurrent baseline: one LSTM over (question, answer) embeddings.

    No graph aggregation, no modes, no recap; the prediction is a logistic
    readout of the current state concatenated with the question embedding.
    """

    def __init__(self, n_q: int, d: int = 100):
        super().__init__()
        self.d = d
        self.question = nn.Embedding(n_q, d)
        self.answer = nn.Embedding(2, d)
        self.cell = nn.LSTMCell(2 * d, d)
        self.readout = nn.Linear(2 * d, 1)
        self.use_modes = False
        self.variant = "dkt-baseline"

    def forward(
        self,
        questions: torch.Tensor,
        answers: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        B, T = questions.shape
        dtype = self.question.weight.dtype
        h = torch.zeros(B, self.d, dtype=dtype, device=questions.device)
        c = torch.zeros_like(h)
        preds = []
        for t in range(T):
            x_q = self.question(questions[:, t])
            logits = self.readout(torch.cat([h, x_q], dim=-1)).squeeze(-1)
            preds.append(torch.sigmoid(logits))
            step_in = torch.cat([x_q, self.answer(answers[:, t])], dim=-1)
            h, c = self.cell(step_in, (h, c))
        reloss = torch.zeros((), dtype=dtype, device=questions.device)
        return torch.stack(preds, dim=1), reloss
