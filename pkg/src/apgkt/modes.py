"""Per-question skill-mode vectors and their autoencoded embeddings.

A question's mode vector is the row-major flattening of the skills-graph
submatrix restricted to the question's skills, visited in ascending
difficulty order and zero-padded to a fixed width of ``h_max ** 2``. An
affine encoder maps it to a compact embedding; a matching decoder provides
the reconstruction objective used to train the encoder.

The reconstruction target is the decoded vector, not the raw code: the code
and the mode vector have different widths in general, so the loss is the
mean squared error between the input and its decode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import InteractionLog
from .skillgraph import SkillsGraph

_ACTIVATIONS = {
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "identity": lambda x: x,
}


def difficulty_order(sset: Iterable[int], diff: np.ndarray) -> list[int]:
    """Sort a skill set by difficulty ascending, ties by skill index ascending."""
    sset = list(sset)
    if not sset:
        raise ValueError("skill set must be non-empty")
    diff = np.asarray(diff)
    return sorted(set(sset), key=lambda s: (diff[s], s))


@dataclass(frozen=True)
class ModeVector:
    """Flattened difficulty-ordered subgraph of one question.

    ``m[: h * h]`` holds the h x h submatrix row-major; the remainder is
    exactly zero padding up to ``h_max ** 2``.
    """

    m: np.ndarray
    h: int
    idx: tuple[int, ...]


def extract_mode_vector(
    ss: np.ndarray | SkillsGraph, idx: Sequence[int], h_max: int
) -> ModeVector:
    """Read the SS submatrix at ``idx`` x ``idx`` and flatten with zero padding."""
    if isinstance(ss, SkillsGraph):
        ss = ss.ss
    ss = np.asarray(ss, dtype=np.float64)
    idx = list(idx)
    h = len(idx)
    if h == 0:
        raise ValueError("index list must be non-empty")
    if h > h_max:
        raise ValueError(f"question has {h} skills but h_max is {h_max}")
    m = np.zeros(h_max * h_max, dtype=np.float64)
    m[: h * h] = ss[np.ix_(idx, idx)].reshape(-1)
    return ModeVector(m=m, h=h, idx=tuple(idx))


def mode_matrix(
    question_skills: Sequence[frozenset[int]],
    ss: np.ndarray | SkillsGraph,
    diff: np.ndarray,
    h_max: int,
) -> np.ndarray:
    """Stack the mode vectors of every question into an [n_q, h_max**2] matrix."""
    rows = [
        extract_mode_vector(ss, difficulty_order(skills, diff), h_max).m
        for skills in question_skills
    ]
    return np.stack(rows)


class ModeAutoencoder(nn.Module):
    """Single-layer affine encoder/decoder pair over mode vectors.

    Mode entries live in [0, 1], so a logistic output activation is offered
    for the decoder as an alternative to the default tanh.
    """

    def __init__(
        self,
        input_dim: int,
        code_dim: int = 100,
        activation: str = "tanh",
        decoder_activation: str = "tanh",
    ):
        super().__init__()
        if activation not in _ACTIVATIONS or decoder_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation: {activation!r}/{decoder_activation!r}")
        self.input_dim = input_dim
        self.code_dim = code_dim
        self.activation = activation
        self.decoder_activation = decoder_activation
        self.encoder = nn.Linear(input_dim, code_dim)
        self.decoder = nn.Linear(code_dim, input_dim)

    def encode(self, m: torch.Tensor) -> torch.Tensor:
        if m.shape[-1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got {m.shape[-1]}")
        return _ACTIVATIONS[self.activation](self.encoder(m))

    def decode(self, code: torch.Tensor) -> torch.Tensor:
        if code.shape[-1] != self.code_dim:
            raise ValueError(f"expected code width {self.code_dim}, got {code.shape[-1]}")
        return _ACTIVATIONS[self.decoder_activation](self.decoder(code))

    def forward(self, m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        code = self.encode(m)
        return code, self.decode(code)


def encode_mode(m: torch.Tensor, autoencoder: ModeAutoencoder) -> torch.Tensor:
    """Embed a mode vector (or batch of them) with the current encoder weights."""
    return autoencoder.encode(m)


def decode_mode(code: torch.Tensor, autoencoder: ModeAutoencoder) -> torch.Tensor:
    """Map a mode embedding (or batch) back to mode-vector space."""
    return autoencoder.decode(code)


def reconstruction_loss(m: torch.Tensor, m_hat: torch.Tensor) -> torch.Tensor:
    """Batch-mean of the per-sample mean squared reconstruction error."""
    if m.shape != m_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(m.shape)} vs {tuple(m_hat.shape)}")
    if m.numel() == 0:
        raise ValueError("empty batch")
    return ((m_hat - m) ** 2).mean()


def export_modes_csv(
    log: InteractionLog, modes: np.ndarray, path: str | Path
) -> None:
    """Per-question CSV: original question id, skill count, then the mode entries."""
    inv_q = {v: k for k, v in log.question_id_map.items()}
    width = modes.shape[1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["question_id", "h"] + [f"m_{i}" for i in range(width)])
        for q in range(log.n_q):
            h = len(log.question_skills[q])
            writer.writerow([inv_q[q], h] + [f"{v:.17g}" for v in modes[q]])
