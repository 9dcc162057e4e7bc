"""Training objectives.

Public API
----------
trm_loss(logits, labels, candidate_mask=None) -> scalar
    Cross-entropy over candidate logits.
align_loss(video, caption, temperature) -> scalar
    Symmetric in-batch video/caption contrastive loss over unit vectors.
AlignHead(dim, projection_dim, init_temperature)
    Projections g_v, g_c (affine + L2 normalization) and log-temperature.
LossWeights(mode)
    Learnable log-variances s1, s2 for uncertainty weighting.
combine_losses(l_trm, l_align, weights) -> scalar
qa_loss(logits, answers, vocabulary, skipped=None) -> scalar
    Cross-entropy over the answer vocabulary; answers outside it are dropped
    and counted in `skipped["out_of_vocabulary"]`.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from dest_qa.numeric import masked_value


def trm_loss(
    logits: torch.Tensor,
    labels: torch.Tensor | Sequence[int] | int,
    candidate_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean cross-entropy; logits [C] with an int label, or [B, C] with labels [B]."""
    if logits.dim() == 1:
        logits = logits[None]
        labels = [labels] if isinstance(labels, int) else labels
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    if labels.numel() != logits.shape[0]:
        raise ValueError(f"trm_loss: {labels.numel()} labels for {logits.shape[0]} rows")

    counts = (
        candidate_mask.sum(dim=-1)
        if candidate_mask is not None
        else torch.full_like(labels, logits.shape[-1])
    )
    if (labels < 0).any() or (labels >= counts).any():
        raise ValueError("trm_loss: label outside the candidate range")

    if candidate_mask is not None:
        logits = logits.masked_fill(~candidate_mask, masked_value(logits.dtype))
    return F.cross_entropy(logits, labels)


def align_loss(video: torch.Tensor, caption: torch.Tensor, temperature: torch.Tensor) -> torch.Tensor:
    """Symmetric contrastive loss over P matched pairs.

    Args:
        video: [P, d] unit vectors g_v(f_v(V_k)).
        caption: [P, d] unit vectors g_c(f_c(C_k)); row k is the match of video row k.
        temperature: positive scalar tensor.
    """
    if video.shape != caption.shape or video.shape[0] < 1:
        raise ValueError(f"align_loss: need matching [P, d] inputs, got {tuple(video.shape)} / {tuple(caption.shape)}")
    sim = video @ caption.T / temperature
    # one-hot targets sit on the diagonal
    v2c = -F.log_softmax(sim, dim=1).diagonal()
    c2v = -F.log_softmax(sim, dim=0).diagonal()
    return 0.5 * (v2c + c2v).mean()


class AlignHead(nn.Module):
    """g_v, g_c into a normalized lower-dimensional space, plus tau = exp(log_temperature)."""

    def __init__(self, dim: int, projection_dim: int, init_temperature: float = 0.07):
        super().__init__()
        self.video_projection = nn.Linear(dim, projection_dim)
        self.caption_projection = nn.Linear(dim, projection_dim)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(init_temperature)))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def forward(self, video: torch.Tensor, caption: torch.Tensor) -> torch.Tensor:
        v = F.normalize(self.video_projection(video), dim=-1)
        c = F.normalize(self.caption_projection(caption), dim=-1)
        return align_loss(v, c, self.temperature)


class LossWeights(nn.Module):
    """s := log sigma^2 for the TRM and alignment losses."""

    def __init__(self, mode: str = "unweighted"):
        super().__init__()
        if mode not in ("unweighted", "uncertainty"):
            raise ValueError(f"unknown loss weighting {mode!r}")
        self.mode = mode
        self.log_var_trm = nn.Parameter(torch.tensor(0.0))
        self.log_var_align = nn.Parameter(torch.tensor(0.0))


def combine_losses(
    l_trm: torch.Tensor, l_align: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    if weights.mode == "unweighted":
        return l_trm + l_align
    s1, s2 = weights.log_var_trm, weights.log_var_align
    return 0.5 * torch.exp(-s1) * l_trm + 0.5 * torch.exp(-s2) * l_align + s1 + s2


@dataclass
class QaTargets:
    indices: torch.Tensor  # [B'] position in the vocabulary
    keep: torch.Tensor  # [B] bool, rows with an in-vocabulary answer


def qa_targets(answers: Sequence[int], vocabulary: Sequence[int]) -> QaTargets:
    position = {a: i for i, a in enumerate(vocabulary)}
    keep = torch.tensor([a in position for a in answers], dtype=torch.bool)
    indices = torch.tensor([position[a] for a in answers if a in position], dtype=torch.long)
    return QaTargets(indices=indices, keep=keep)


def qa_loss(
    logits: torch.Tensor,
    answers: Sequence[int],
    vocabulary: Sequence[int],
    skipped: Counter | None = None,
) -> torch.Tensor:
    """Softmax cross-entropy over logits [B, |vocabulary|] for answer ids."""
    if logits.shape[-1] != len(vocabulary):
        raise ValueError(f"qa_loss: {logits.shape[-1]} logits for a vocabulary of {len(vocabulary)}")
    targets = qa_targets(answers, vocabulary)
    dropped = int((~targets.keep).sum())
    if skipped is not None and dropped:
        skipped["out_of_vocabulary"] += dropped
    if targets.indices.numel() == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits[targets.keep.to(logits.device)], targets.indices.to(logits.device))
