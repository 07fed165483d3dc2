"""Base embeddings and their propagation over the question-skill bigraph.

Each layer replaces a node's embedding with an activated linear map of the
mean over the node itself and its (sampled) neighbors on the other side of
the bigraph; both sides are updated simultaneously from the previous layer's
values, so stacking layers alternates question and skill hops.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

_ACTIVATIONS = {
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "identity": lambda x: x,
}


class EmbeddingTable(nn.Module):
    """Randomly initialized question, skill, and answer embeddings."""

    def __init__(self, n_q: int, n_s: int, d: int = 100):
        super().__init__()
        self.d = d
        self.question = nn.Embedding(n_q, d)
        self.skill = nn.Embedding(n_s, d)
        self.answer = nn.Embedding(2, d)


class BigraphNeighborhood:
    """Neighbor lists of the question-skill bigraph with a per-node sample cap.

    Nodes whose degree exceeds ``cap`` keep a fixed random sample of ``cap``
    neighbors, drawn once at construction from the given seed, so repeated
    runs see identical neighborhoods.
    """

    def __init__(
        self,
        question_skills: Sequence[frozenset[int]],
        n_s: int,
        cap: int = 10,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        q_lists = [sorted(skills) for skills in question_skills]
        s_lists: list[list[int]] = [[] for _ in range(n_s)]
        for q, skills in enumerate(q_lists):
            for s in skills:
                s_lists[s].append(q)
        self.question_neighbors = [self._sample(l, cap, rng) for l in q_lists]
        self.skill_neighbors = [self._sample(l, cap, rng) for l in s_lists]
        self.n_q = len(q_lists)
        self.n_s = n_s
        self.cap = cap

    @staticmethod
    def _sample(neighbors: list[int], cap: int, rng: np.random.Generator) -> list[int]:
        if len(neighbors) <= cap:
            return list(neighbors)
        picked = rng.choice(len(neighbors), size=cap, replace=False)
        return [neighbors[i] for i in sorted(picked)]

    def padded(self, side: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Index/mask tensors for vectorized gathering; ``side`` is 'q' or 's'."""
        lists = self.question_neighbors if side == "q" else self.skill_neighbors
        width = max((len(l) for l in lists), default=0)
        width = max(width, 1)
        idx = torch.zeros(len(lists), width, dtype=torch.long)
        mask = torch.zeros(len(lists), width, dtype=torch.bool)
        for i, l in enumerate(lists):
            if l:
                idx[i, : len(l)] = torch.tensor(l, dtype=torch.long)
                mask[i, : len(l)] = True
        return idx, mask


def propagate_layer(
    node_embs: torch.Tensor,
    neighbor_embs: torch.Tensor,
    neighbor_idx: torch.Tensor,
    neighbor_mask: torch.Tensor,
    linear: nn.Linear,
    activation: str = "tanh",
) -> torch.Tensor:
    """One propagation step: activated linear map of mean(self, neighbors).

    ``neighbor_embs`` holds the other side's embeddings; nodes without
    neighbors reduce to the self-only mean.
    """
    gathered = neighbor_embs[neighbor_idx]
    m = neighbor_mask.unsqueeze(-1).to(gathered.dtype)
    total = node_embs + (gathered * m).sum(dim=1)
    count = 1.0 + neighbor_mask.sum(dim=1, keepdim=True).to(gathered.dtype)
    return _ACTIVATIONS[activation](linear(total / count))


class BigraphEncoder(nn.Module):
    """Stack of propagation layers producing aggregated question/skill embeddings.

    ``n_layers = 0`` is the documented degenerate mode returning the base
    tables unchanged (used by ablations).
    """

    def __init__(
        self,
        neighborhood: BigraphNeighborhood,
        d: int,
        n_layers: int = 2,
        activation: str = "tanh",
    ):
        super().__init__()
        if n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {n_layers}")
        self.n_layers = n_layers
        self.activation = activation
        self.layers = nn.ModuleList(nn.Linear(d, d) for _ in range(n_layers))
        q_idx, q_mask = neighborhood.padded("q")
        s_idx, s_mask = neighborhood.padded("s")
        self.register_buffer("q_nbr_idx", q_idx)
        self.register_buffer("q_nbr_mask", q_mask)
        self.register_buffer("s_nbr_idx", s_idx)
        self.register_buffer("s_nbr_mask", s_mask)

    def forward(self, tables: EmbeddingTable) -> tuple[torch.Tensor, torch.Tensor]:
        q = tables.question.weight
        s = tables.skill.weight
        for linear in self.layers:
            q_next = propagate_layer(
                q, s, self.q_nbr_idx, self.q_nbr_mask, linear, self.activation
            )
            s_next = propagate_layer(
                s, q, self.s_nbr_idx, self.s_nbr_mask, linear, self.activation
            )
            q, s = q_next, s_next
        return q, s


def aggregate_embeddings(
    tables: EmbeddingTable, encoder: BigraphEncoder
) -> tuple[torch.Tensor, torch.Tensor]:
    """Aggregated question and skill representations under the current weights."""
    return encoder(tables)
