"""Encoding stacks: question/answer text, frame patches, video contextualizer
and the cross-attention fusion encoder.

All stacks are pre-norm Transformer layers (GELU feed-forward) over the
numeric core. Inputs are batched; variable-length items are right-padded and
carried with a boolean mask (True = real row).

Public API
----------
TextEncoder(vocab_size, max_length, ...)
    (tokens: list of token lists) -> TextEncoding, row 0 = classification slot
FrameEncoder(patch_count, patch_size, ...)
    (frames [F, N, P]) -> FrameEncoding, each frame independently
VideoContextualizer(feature_size, max_video_length, ...)
    (features: list of [M, H]) -> VideoEncoding ordered [bos, v_1..v_M, eos]
CrossEncoder(...)
    (text: TextEncoding, visual [B, Lv, D], visual_mask) -> CrossEncoding,
    text rows as queries, visual rows as keys/values
init_parameters(module, generator)
    Seeded initialization of every parameter, in registration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from dest_qa.numeric import dropout, layer_norm, multi_head_attention


@dataclass
class TextEncoding:
    tokens: list[list[int]]
    encoded: torch.Tensor  # [B, L+1, D]
    mask: torch.Tensor  # [B, L+1]

    @property
    def cls(self) -> torch.Tensor:
        return self.encoded[:, 0]

    def __len__(self) -> int:
        return len(self.tokens)

    def item(self, i: int) -> torch.Tensor:
        """Unpadded (L_i+1) x D matrix of item i."""
        return self.encoded[i, : len(self.tokens[i]) + 1]

    def repeat_each(self, n: int) -> TextEncoding:
        """Repeat every item n times in place (a, a, b, b, ...)."""
        return TextEncoding(
            tokens=[t for t in self.tokens for _ in range(n)],
            encoded=self.encoded.repeat_interleave(n, dim=0),
            mask=self.mask.repeat_interleave(n, dim=0),
        )


@dataclass
class FrameEncoding:
    encoded: torch.Tensor  # [F, N+1, D], row 0 = u_cls

    def __len__(self) -> int:
        return self.encoded.shape[0]


@dataclass
class VideoEncoding:
    lengths: list[int]  # M per item
    contextualized: torch.Tensor  # [B, M_max+2, D]
    mask: torch.Tensor  # [B, M_max+2]

    def item(self, i: int) -> torch.Tensor:
        return self.contextualized[i, : self.lengths[i] + 2]


@dataclass
class CrossEncoding:
    encoded: torch.Tensor  # [B, L+1, D]
    mask: torch.Tensor

    @property
    def cls(self) -> torch.Tensor:
        return self.encoded[:, 0]


class Dropout(nn.Module):
    """Dropout driven by an explicit generator (set per training step)."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dropout(x, self.p, self.generator, self.training)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.output = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, context: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        attended = multi_head_attention(
            self.query(x), self.key(context), self.value(context), self.n_heads, mask
        )
        return self.output(attended)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, p: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.dropout = Dropout(p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class SelfAttentionLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, hidden: int, p: float):
        super().__init__()
        self.norm_attn = LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, p)
        self.dropout = Dropout(p)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.dropout(self.attn(h, h, mask))
        return x + self.dropout(self.ffn(self.norm_ffn(x)))


class CrossAttentionLayer(nn.Module):
    """Self-attention over text, cross-attention into visual rows, feed-forward."""

    def __init__(self, dim: int, n_heads: int, hidden: int, p: float):
        super().__init__()
        self.norm_self = LayerNorm(dim)
        self.self_attn = Attention(dim, n_heads)
        self.norm_cross = LayerNorm(dim)
        self.cross_attn = Attention(dim, n_heads)
        self.norm_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, p)
        self.dropout = Dropout(p)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor | None,
        visual: torch.Tensor,
        visual_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        h = self.norm_self(x)
        x = x + self.dropout(self.self_attn(h, h, mask))
        x = x + self.dropout(self.cross_attn(self.norm_cross(x), visual, visual_mask))
        return x + self.dropout(self.ffn(self.norm_ffn(x)))


class SelfAttentionStack(nn.Module):
    def __init__(self, dim: int, n_layers: int, n_heads: int, hidden: int, p: float):
        super().__init__()
        self.layers = nn.ModuleList(
            SelfAttentionLayer(dim, n_heads, hidden, p) for _ in range(n_layers)
        )
        self.norm = LayerNorm(dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


class TextEncoder(nn.Module):
    """Token embeddings + learned positions + classification slot."""

    def __init__(
        self,
        vocab_size: int,
        max_length: int,
        dim: int,
        n_layers: int,
        n_heads: int,
        hidden: int,
        p: float,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_length = max_length
        self.cls = nn.Parameter(torch.zeros(dim))
        self.token_embedding = nn.Embedding(vocab_size, dim)
        self.position_embedding = nn.Embedding(max_length + 1, dim)
        self.stack = SelfAttentionStack(dim, n_layers, n_heads, hidden, p)

    def forward(self, tokens: Sequence[Sequence[int]]) -> TextEncoding:
        if not tokens:
            raise ValueError("encode_text: empty batch")
        for t in tokens:
            if not t:
                raise ValueError("encode_text: empty token list")
            if len(t) > self.max_length:
                raise ValueError(
                    f"encode_text: {len(t)} tokens exceed max length {self.max_length}"
                )
            if min(t) < 0 or max(t) >= self.vocab_size:
                raise ValueError(f"encode_text: token id outside vocabulary [0, {self.vocab_size})")

        batch, longest = len(tokens), max(len(t) for t in tokens)
        device = self.cls.device
        ids = torch.zeros(batch, longest, dtype=torch.long, device=device)
        mask = torch.zeros(batch, longest + 1, dtype=torch.bool, device=device)
        for i, t in enumerate(tokens):
            ids[i, : len(t)] = torch.tensor(list(t), dtype=torch.long)
            mask[i, : len(t) + 1] = True

        cls = self.cls.expand(batch, 1, -1)
        x = torch.cat([cls, self.token_embedding(ids)], dim=1)
        x = x + self.position_embedding.weight[: longest + 1]
        encoded = self.stack(x, mask)
        return TextEncoding(tokens=[list(t) for t in tokens], encoded=encoded, mask=mask)


class FrameEncoder(nn.Module):
    """Per-frame patch encoder; frames never attend to each other."""

    def __init__(
        self,
        patch_count: int,
        patch_size: int,
        dim: int,
        n_layers: int,
        n_heads: int,
        hidden: int,
        p: float,
    ):
        super().__init__()
        self.patch_count = patch_count
        self.patch_size = patch_size
        self.cls = nn.Parameter(torch.zeros(dim))
        self.patch_projection = nn.Linear(patch_size, dim)
        self.position_embedding = nn.Embedding(patch_count + 1, dim)
        self.stack = SelfAttentionStack(dim, n_layers, n_heads, hidden, p)

    def forward(self, frames: torch.Tensor | Sequence[torch.Tensor]) -> FrameEncoding:
        if not isinstance(frames, torch.Tensor):
            if not frames:
                raise ValueError("encode_frames: empty frame list")
            frames = torch.stack(list(frames))
        if frames.dim() != 3 or frames.shape[0] == 0:
            raise ValueError(f"encode_frames: expected [F, N, P] with F >= 1, got {tuple(frames.shape)}")
        if frames.shape[1:] != (self.patch_count, self.patch_size):
            raise ValueError(
                f"encode_frames: frames must be {self.patch_count} x {self.patch_size}, "
                f"got {tuple(frames.shape[1:])}"
            )
        frames = frames.to(self.cls.dtype)
        cls = self.cls.expand(frames.shape[0], 1, -1)
        x = torch.cat([cls, self.patch_projection(frames)], dim=1)
        x = x + self.position_embedding.weight
        return FrameEncoding(encoded=self.stack(x, None))


class VideoContextualizer(nn.Module):
    """Projects H -> D, wraps with learnable bos/eos, adds temporal positions."""

    def __init__(
        self,
        feature_size: int,
        max_video_length: int,
        dim: int,
        n_layers: int,
        n_heads: int,
        hidden: int,
        p: float,
    ):
        super().__init__()
        self.feature_size = feature_size
        self.max_video_length = max_video_length
        self.bos = nn.Parameter(torch.zeros(dim))
        self.eos = nn.Parameter(torch.zeros(dim))
        self.input_projection = nn.Linear(feature_size, dim)
        self.position_embedding = nn.Embedding(max_video_length + 2, dim)
        self.stack = SelfAttentionStack(dim, n_layers, n_heads, hidden, p)

    def forward(self, features: Sequence[torch.Tensor]) -> VideoEncoding:
        if len(features) == 0:
            raise ValueError("contextualize_video: empty batch")
        for e in features:
            if e.dim() != 2 or e.shape[0] == 0:
                raise ValueError(f"contextualize_video: need M >= 1 rows, got {tuple(e.shape)}")
            if e.shape[0] > self.max_video_length:
                raise ValueError(
                    f"contextualize_video: M={e.shape[0]} exceeds max video length {self.max_video_length}"
                )
            if e.shape[1] != self.feature_size:
                raise ValueError(
                    f"contextualize_video: feature width {e.shape[1]} != {self.feature_size}"
                )

        lengths = [int(e.shape[0]) for e in features]
        batch, longest = len(features), max(lengths)
        dtype, device = self.bos.dtype, self.bos.device
        raw = torch.zeros(batch, longest, self.feature_size, dtype=dtype, device=device)
        for i, e in enumerate(features):
            raw[i, : lengths[i]] = e.to(dtype)

        rows = torch.arange(longest + 2, device=device)
        length_t = torch.tensor(lengths, device=device)
        mask = rows[None, :] < (length_t[:, None] + 2)
        is_eos = (rows[None, :] == (length_t[:, None] + 1))[..., None]

        bos = self.bos.expand(batch, 1, -1)
        tail = torch.zeros(batch, 1, bos.shape[-1], dtype=dtype, device=device)
        x = torch.cat([bos, self.input_projection(raw), tail], dim=1)
        x = torch.where(is_eos, self.eos.expand_as(x), x)
        x = x + self.position_embedding.weight[: longest + 2]
        return VideoEncoding(lengths=lengths, contextualized=self.stack(x, mask), mask=mask)


class CrossEncoder(nn.Module):
    def __init__(self, dim: int, n_layers: int, n_heads: int, hidden: int, p: float):
        super().__init__()
        self.layers = nn.ModuleList(
            CrossAttentionLayer(dim, n_heads, hidden, p) for _ in range(n_layers)
        )
        self.norm = LayerNorm(dim)

    def forward(
        self,
        text: TextEncoding,
        visual: torch.Tensor,
        visual_mask: torch.Tensor | None = None,
    ) -> CrossEncoding:
        if visual.dim() != 3 or visual.shape[1] == 0:
            raise ValueError(f"cross_encode: empty visual input {tuple(visual.shape)}")
        if visual.shape[0] != text.encoded.shape[0]:
            raise ValueError(
                f"cross_encode: batch mismatch, text {text.encoded.shape[0]} vs visual {visual.shape[0]}"
            )
        x = text.encoded
        for layer in self.layers:
            x = layer(x, text.mask, visual, visual_mask)
        return CrossEncoding(encoded=self.norm(x), mask=text.mask)


def init_parameters(module: nn.Module, generator: torch.Generator, std: float = 0.02) -> None:
    """Seeded init: Xavier-uniform matrices, N(0, std) embeddings and special rows,
    unit gains, zero biases. Order follows named_parameters()."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                p.fill_(1.0)
            elif leaf == "bias":
                p.zero_()
            elif "embedding" in name or leaf in ("cls", "bos", "eos"):
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
            elif p.dim() == 2:
                fan_out, fan_in = p.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_((torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 - 1) * bound)
