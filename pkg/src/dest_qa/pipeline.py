"""Two-stream answer selection.

Public API
----------
sample_frames(frame_count, T, mode, rng=None) -> list[int]
StreamMask(use_il=True, use_vl=True)
    StreamMask.BOTH / IL_ONLY / VL_ONLY / from_name("both" | "il" | "vl")
StreamOutputs(r, s, logits)
AnswerBank(vectors, mask=None)
    Encoded candidates, shared [C, D] or per sample [B, C, D] with mask [B, C].
DestModel(config, vocab_size)
    Question, frame, video, image-language, video-language and answer
    encoders plus the two final MLPs, the alignment head and loss weights.
    encode_text / encode_frames / contextualize_video / encode_answers
    il_representation(question, frames, frame_mask=None) -> [B, D]
    vl_representation(question, video) -> [B, D]
    answer_logits(r, s, answers, mask=BOTH) -> logits
    forward(questions, candidates, frames=None, videos=None, mask=BOTH, frame_mask=None)
QuestionOnlyModel(config, vocab_size)
    Question CLS vector dotted with answer vectors; ignores frames and video.
build_model(config, vocab_size, kind, generator) -> AnswerSelector
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import ClassVar, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from dest_qa.config import TrainConfig
from dest_qa.encoders import (
    CrossEncoder,
    Dropout,
    FrameEncoder,
    TextEncoder,
    TextEncoding,
    VideoContextualizer,
    VideoEncoding,
    init_parameters,
)
from dest_qa.numeric import masked_value
from dest_qa.objectives import AlignHead, LossWeights


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


def sample_frames(
    frame_count: int, T: int, mode: Mode | str, rng: np.random.Generator | None = None
) -> list[int]:
    """Frame indices for the image-language stream, ascending.

    Eval spreads T points evenly over [0, frame_count - 1] (both ends
    included, rounded half up; middle frame for T=1) and drops repeats.
    Train draws T indices uniformly, without replacement when possible.
    """
    if frame_count < 1 or T < 1:
        raise ValueError(f"sample_frames: need frame_count >= 1 and T >= 1, got {frame_count}, {T}")
    mode = Mode(mode)

    if mode is Mode.TRAIN:
        if rng is None:
            raise ValueError("sample_frames: train mode needs an rng")
        picked = rng.choice(frame_count, size=T, replace=frame_count < T)
        return sorted(int(i) for i in picked)

    if T == 1:
        positions = [(frame_count - 1) / 2]
    else:
        positions = [j * (frame_count - 1) / (T - 1) for j in range(T)]
    indices: list[int] = []
    for pos in positions:
        index = int(np.floor(pos + 0.5))
        if not indices or indices[-1] != index:
            indices.append(index)
    return indices


@dataclass(frozen=True)
class StreamMask:
    use_il: bool = True
    use_vl: bool = True

    BOTH: ClassVar[StreamMask]
    IL_ONLY: ClassVar[StreamMask]
    VL_ONLY: ClassVar[StreamMask]

    @property
    def name(self) -> str:
        return {(True, True): "both", (True, False): "il", (False, True): "vl"}.get(
            (self.use_il, self.use_vl), "none"
        )

    @classmethod
    def from_name(cls, name: str) -> StreamMask:
        masks = {"both": cls.BOTH, "il": cls.IL_ONLY, "vl": cls.VL_ONLY}
        if name not in masks:
            raise ValueError(f"Unknown stream mask: {name}. Must be one of: {', '.join(masks)}")
        return masks[name]


StreamMask.BOTH = StreamMask(True, True)
StreamMask.IL_ONLY = StreamMask(True, False)
StreamMask.VL_ONLY = StreamMask(False, True)


@dataclass
class StreamOutputs:
    r: torch.Tensor  # [B, D] image-language representation
    s: torch.Tensor  # [B, D] video-language representation
    logits: torch.Tensor  # [B, C]


@dataclass
class AnswerBank:
    vectors: torch.Tensor
    mask: torch.Tensor | None = None


class FinalMlp(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


# learning-rate group of each top-level submodule
PARAMETER_GROUPS = {
    "question_encoder": "base",
    "frame_encoder": "base",
    "il_encoder": "base",
    "il_head": "mlp",
    "video_encoder": "video",
    "vl_encoder": "video",
    "vl_head": "mlp",
    "align": "mlp",
    "loss_weights": "mlp",
    "answer_encoder": "ans",
}


class AnswerSelector(nn.Module):
    """Shared surface of the two-stream model and the question-only baseline."""

    kind: str = ""

    def __init__(self, config: TrainConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        c = config
        self.question_encoder = TextEncoder(
            vocab_size, c.max_question_length, c.embedding_size, c.num_layers,
            c.num_heads, c.ffn_size, c.dropout,
        )  # fmt: skip
        self.answer_encoder = TextEncoder(
            vocab_size, c.max_question_length, c.embedding_size, c.num_layers,
            c.num_heads, c.ffn_size, c.dropout,
        )  # fmt: skip

    def encode_text(self, tokens: Sequence[Sequence[int]]) -> TextEncoding:
        return self.question_encoder(tokens)

    def encode_answers(self, candidates: Sequence[Sequence[int]]) -> torch.Tensor:
        """z_cls per candidate, [C, D]."""
        if not candidates:
            raise ValueError("encode_answers: empty candidate list")
        return self.answer_encoder(candidates).cls

    def encode_candidate_sets(self, sets: Sequence[Sequence[Sequence[int]]]) -> AnswerBank:
        """Per-sample candidate lists -> [B, C_max, D] with a validity mask."""
        if not sets or any(not s for s in sets):
            raise ValueError("encode_candidate_sets: every sample needs candidates")
        flat = [c for s in sets for c in s]
        vectors = self.encode_answers(flat)
        longest = max(len(s) for s in sets)
        index = torch.zeros(len(sets), longest, dtype=torch.long)
        mask = torch.zeros(len(sets), longest, dtype=torch.bool)
        offset = 0
        for i, s in enumerate(sets):
            index[i, : len(s)] = torch.arange(offset, offset + len(s))
            mask[i, : len(s)] = True
            offset += len(s)
        return AnswerBank(vectors=vectors[index.to(vectors.device)], mask=mask.to(vectors.device))

    def resolve_answers(self, candidates: Sequence[Sequence[int]] | AnswerBank) -> AnswerBank:
        if isinstance(candidates, AnswerBank):
            return candidates
        return AnswerBank(vectors=self.encode_answers(candidates))

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {}
        for name, p in self.named_parameters():
            groups.setdefault(PARAMETER_GROUPS[name.split(".", 1)[0]], []).append((name, p))
        return groups

    def set_dropout_generator(self, generator: torch.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.generator = generator


def dot_logits(
    combined: torch.Tensor, answers: AnswerBank | torch.Tensor
) -> torch.Tensor:
    bank = answers if isinstance(answers, AnswerBank) else AnswerBank(answers)
    if bank.vectors.dim() == 2:
        if bank.vectors.shape[0] == 0:
            raise ValueError("answer_logits: empty answer list")
        logits = combined @ bank.vectors.T
    else:
        logits = (bank.vectors @ combined[..., None]).squeeze(-1)
    if bank.mask is not None:
        logits = logits.masked_fill(~bank.mask, masked_value(logits.dtype))
    return logits


class DestModel(AnswerSelector):
    kind = "dest"

    def __init__(self, config: TrainConfig, vocab_size: int):
        super().__init__(config, vocab_size)
        c = config
        d = c.embedding_size
        self.frame_encoder = FrameEncoder(
            c.patch_count, c.patch_size, d, c.num_layers, c.num_heads, c.ffn_size, c.dropout
        )
        self.video_encoder = VideoContextualizer(
            c.feature_size, c.max_video_length, d, c.num_layers, c.num_heads, c.ffn_size, c.dropout
        )
        self.il_encoder = CrossEncoder(d, c.num_layers, c.num_heads, c.ffn_size, c.dropout)
        self.vl_encoder = CrossEncoder(d, c.num_layers, c.num_heads, c.ffn_size, c.dropout)
        self.il_head = FinalMlp(d)
        self.vl_head = FinalMlp(d)
        self.align = AlignHead(d, c.projection_dim, c.init_temperature)
        self.loss_weights = LossWeights(c.loss_weighting)

    def encode_frames(self, frames):
        return self.frame_encoder(frames)

    def contextualize_video(self, features: Sequence[torch.Tensor]) -> VideoEncoding:
        return self.video_encoder(features)

    def il_representation(
        self,
        question: TextEncoding,
        frames: torch.Tensor,
        frame_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """r = mean over frame slots of MLP(x_cls^t).

        Args:
            frames: [B, T, N, P] patch matrices.
            frame_mask: [B, T], False on padded slots.
        """
        if frames.dim() != 4 or frames.shape[1] == 0:
            raise ValueError(f"il_representation: need [B, T >= 1, N, P] frames, got {tuple(frames.shape)}")
        batch, slots = frames.shape[:2]
        encoded = self.frame_encoder(frames.reshape(batch * slots, *frames.shape[2:]))
        fused = self.il_encoder(question.repeat_each(slots), encoded.encoded)
        per_frame = self.il_head(fused.cls).reshape(batch, slots, -1)
        if frame_mask is None:
            return per_frame.mean(dim=1)
        weight = frame_mask.to(per_frame.dtype)[..., None]
        return (per_frame * weight).sum(dim=1) / weight.sum(dim=1)

    def vl_representation(self, question: TextEncoding, video: VideoEncoding) -> torch.Tensor:
        fused = self.vl_encoder(question, video.contextualized, video.mask)
        return self.vl_head(fused.cls)

    def answer_logits(
        self,
        r: torch.Tensor,
        s: torch.Tensor,
        answers: AnswerBank | torch.Tensor,
        mask: StreamMask = StreamMask.BOTH,
    ) -> torch.Tensor:
        """p_a = (r' + s')^T z_a with masked streams replaced by zero vectors."""
        if not (mask.use_il or mask.use_vl):
            raise ValueError("answer_logits: at least one stream must be enabled")
        r = r if mask.use_il else torch.zeros_like(r)
        s = s if mask.use_vl else torch.zeros_like(s)
        return dot_logits(r + s, answers)

    def forward(
        self,
        questions: Sequence[Sequence[int]],
        candidates: Sequence[Sequence[int]] | AnswerBank,
        frames: torch.Tensor | None = None,
        videos: Sequence[torch.Tensor] | None = None,
        mask: StreamMask = StreamMask.BOTH,
        frame_mask: torch.Tensor | None = None,
    ) -> StreamOutputs:
        question = self.encode_text(questions)
        answers = self.resolve_answers(candidates)
        zeros = torch.zeros_like(question.cls)

        r = zeros
        if mask.use_il:
            if frames is None:
                raise ValueError("forward: image-language stream enabled but no frames given")
            r = self.il_representation(question, frames, frame_mask)
        s = zeros
        if mask.use_vl:
            if videos is None:
                raise ValueError("forward: video-language stream enabled but no video given")
            s = self.vl_representation(question, self.contextualize_video(videos))

        return StreamOutputs(r=r, s=s, logits=self.answer_logits(r, s, answers, mask))


class QuestionOnlyModel(AnswerSelector):
    """Language-bias baseline: no visual input at all."""

    kind = "question_only"

    def forward(
        self,
        questions: Sequence[Sequence[int]],
        candidates: Sequence[Sequence[int]] | AnswerBank,
        frames: torch.Tensor | None = None,
        videos: Sequence[torch.Tensor] | None = None,
        mask: StreamMask = StreamMask.BOTH,
        frame_mask: torch.Tensor | None = None,
    ) -> StreamOutputs:
        w_cls = self.encode_text(questions).cls
        logits = dot_logits(w_cls, self.resolve_answers(candidates))
        return StreamOutputs(r=w_cls, s=torch.zeros_like(w_cls), logits=logits)


MODEL_KINDS = {
    DestModel.kind: DestModel,
    QuestionOnlyModel.kind: QuestionOnlyModel,
}


def build_model(
    config: TrainConfig,
    vocab_size: int,
    kind: str = DestModel.kind,
    generator: torch.Generator | None = None,
) -> AnswerSelector:
    """Construct and initialize a model; `generator` drives the init stream."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"Unknown model kind: {kind}. Must be one of: {', '.join(MODEL_KINDS)}")
    model = MODEL_KINDS[kind](config, vocab_size)
    init_parameters(model, generator if generator is not None else torch.Generator().manual_seed(0))
    return model
