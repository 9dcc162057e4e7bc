"""Collation of samples into model inputs, and the seeded data order."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from dest_qa.numeric import DATA_ORDER, Seeds
from dest_qa.pipeline import Mode, sample_frames
from dest_qa.qa import QaSample, QuestionType
from dest_qa.trm import Template, TrmSample


@dataclass
class TrmBatch:
    questions: list[list[int]]
    videos: list[torch.Tensor]  # [M_b, H]
    candidates: list[list[list[int]]]
    labels: torch.Tensor  # [B]
    templates: list[Template]
    boundaries: list[list[int]]  # clip boundaries per sample
    clip_captions: list[list[int]]  # caption of every clip, flattened over the batch

    def __len__(self) -> int:
        return len(self.questions)


@dataclass
class QaBatch:
    questions: list[list[int]]
    videos: list[torch.Tensor]
    frames: torch.Tensor  # [B, T, N, P]
    frame_mask: torch.Tensor  # [B, T]
    answers: list[int]
    question_types: list[QuestionType]
    templates: list[str]

    def __len__(self) -> int:
        return len(self.questions)


def collate_trm(samples: Sequence[TrmSample]) -> TrmBatch:
    if not samples:
        raise ValueError("collate_trm: empty batch")
    return TrmBatch(
        questions=[list(s.question) for s in samples],
        videos=[torch.from_numpy(np.asarray(s.features, dtype=np.float32)) for s in samples],
        candidates=[s.candidates for s in samples],
        labels=torch.tensor([s.label for s in samples], dtype=torch.long),
        templates=[s.template for s in samples],
        boundaries=[s.manifest.boundaries for s in samples],
        clip_captions=[c for s in samples for c in s.manifest.captions],
    )


def collate_qa(
    samples: Sequence[QaSample],
    num_frames: int,
    mode: Mode | str,
    rng: np.random.Generator | None = None,
) -> QaBatch:
    """Frames are sampled per sample and right-padded to the longest selection."""
    if not samples:
        raise ValueError("collate_qa: empty batch")
    picks = [sample_frames(s.frame_count, num_frames, mode, rng) for s in samples]
    slots = max(len(p) for p in picks)
    n, p = samples[0].frames.shape[1:]
    frames = torch.zeros(len(samples), slots, n, p)
    frame_mask = torch.zeros(len(samples), slots, dtype=torch.bool)
    for i, (sample, pick) in enumerate(zip(samples, picks)):
        frames[i, : len(pick)] = torch.from_numpy(np.asarray(sample.frames[pick], dtype=np.float32))
        frame_mask[i, : len(pick)] = True
    return QaBatch(
        questions=[list(s.question) for s in samples],
        videos=[torch.from_numpy(np.asarray(s.features, dtype=np.float32)) for s in samples],
        frames=frames,
        frame_mask=frame_mask,
        answers=[s.answer for s in samples],
        question_types=[s.question_type for s in samples],
        templates=[s.template for s in samples],
    )


def steps_per_epoch(size: int, batch_size: int) -> int:
    return math.ceil(size / batch_size)


def batch_order(size: int, batch_size: int, step: int, seeds: Seeds) -> list[int]:
    """Sample indices of a training step: a fresh seeded permutation per epoch."""
    per_epoch = steps_per_epoch(size, batch_size)
    epoch, position = divmod(step, per_epoch)
    order = seeds.data_rng(DATA_ORDER, epoch).permutation(size)
    return [int(i) for i in order[position * batch_size : (position + 1) * batch_size]]


def chunks(size: int, batch_size: int) -> list[range]:
    return [range(i, min(i + batch_size, size)) for i in range(0, size, batch_size)]
