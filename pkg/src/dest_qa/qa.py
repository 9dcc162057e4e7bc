"""Downstream video QA over the synthetic world.

Even sample indices get a temporal question, odd ones a spatial question:

    temporal   "what happens after C_i ?" / "what happens before C_i ?"
               "what happens first ?" / "what happens last ?"
               answer: event id of the asked clip
    spatial    "what attribute is in this video ?"
               answer: event_count + attribute id (shared by all clips of the video)
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from dest_qa.config import ConfigError, TrainConfig
from dest_qa.numeric import Seeds
from dest_qa.utils.log import log
from dest_qa.world import (
    EventVocab,
    Manifest,
    TokenVocab,
    gen_clip,
    sample_event_ids,
    sequence_frames,
    synthesize_sequence,
)


class QuestionType(Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


TEMPORAL_TEMPLATES = ("after", "before", "first", "last")
SPATIAL_TEMPLATE = "attribute"

QUESTIONS = {
    "after": "what happens after",
    "before": "what happens before",
    "first": "what happens first ?",
    "last": "what happens last ?",
    SPATIAL_TEMPLATE: "what attribute is in this video ?",
}


@dataclass
class QaSample:
    features: np.ndarray  # [M, H]
    frames: np.ndarray  # [M, N, P]
    question: list[int]
    question_type: QuestionType
    template: str
    answer: int
    manifest: Manifest
    attribute_id: int

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


def qa_question(tokens: TokenVocab, template: str, reference: Sequence[int] = ()) -> list[int]:
    prefix = tokens.encode_text(QUESTIONS[template])
    if template in ("after", "before"):
        return prefix + list(reference) + tokens.encode(["?"])
    return prefix


def derive_qa_answer(
    manifest: Manifest, template: str, question: Sequence[int], tokens: TokenVocab, event_count: int
) -> int:
    """Answer id recomputed from the manifest and the question text only."""
    records = manifest.records
    if template == SPATIAL_TEMPLATE:
        return event_count + records[0].attribute_id
    if template == "first":
        return records[0].event_id
    if template == "last":
        return records[-1].event_id
    prefix = len(tokens.encode_text(QUESTIONS[template]))
    referenced = tuple(question[prefix:-1])
    i = [r.caption for r in records].index(referenced)
    return records[i + 1].event_id if template == "after" else records[i - 1].event_id


def gen_qa_sample(
    vocab: EventVocab, config: TrainConfig, question_type: QuestionType, rng: np.random.Generator
) -> QaSample:
    K = config.num_videos_k
    attribute = int(rng.integers(vocab.attribute_count))
    events = sample_event_ids(vocab.event_count, K, rng)
    clips = [gen_clip(vocab, e, rng, attribute_id=attribute) for e in events]
    features, manifest = synthesize_sequence(clips, config.max_video_length)
    frames = sequence_frames(clips, config.max_video_length)

    if question_type is QuestionType.SPATIAL:
        template = SPATIAL_TEMPLATE
        question = qa_question(vocab.tokens, template)
        answer = vocab.attribute_answer(attribute)
    else:
        template = TEMPORAL_TEMPLATES[int(rng.integers(len(TEMPORAL_TEMPLATES)))]
        if template == "after":
            i = int(rng.integers(1, K))  # [1, K-1]
            question = qa_question(vocab.tokens, template, manifest.captions[i - 1])
            answer = events[i]
        elif template == "before":
            i = int(rng.integers(2, K + 1))  # [2, K]
            question = qa_question(vocab.tokens, template, manifest.captions[i - 1])
            answer = events[i - 2]
        else:
            question = qa_question(vocab.tokens, template)
            answer = events[0] if template == "first" else events[-1]

    return QaSample(
        features=features,
        frames=frames,
        question=question,
        question_type=question_type,
        template=template,
        answer=answer,
        manifest=manifest,
        attribute_id=attribute,
    )


def gen_downstream_dataset(
    vocab: EventVocab, config: TrainConfig, size: int, seeds: Seeds, purpose: int
) -> list[QaSample]:
    """Half temporal, half spatial; sample i depends only on (seed, purpose, i)."""
    if size < 1:
        raise ValueError(f"dataset size must be >= 1, got {size}")
    samples = [
        gen_qa_sample(
            vocab,
            config,
            QuestionType.TEMPORAL if i % 2 == 0 else QuestionType.SPATIAL,
            seeds.data_rng(purpose, i),
        )
        for i in range(size)
    ]
    log(f"generated {size} QA samples")
    return samples


def spatial_only(samples: Iterable[QaSample]) -> list[QaSample]:
    return [s for s in samples if s.question_type is QuestionType.SPATIAL]


def build_answer_vocabulary(samples: Iterable[QaSample | int]) -> list[int]:
    """Answers seen more than once, most frequent first, ties by answer id.

    Raises:
        ValueError: on an empty sample list.
        ConfigError: if no answer occurs twice.
    """
    answers = [s if isinstance(s, int) else s.answer for s in samples]
    if not answers:
        raise ValueError("build_answer_vocabulary: no samples")
    counts = Counter(answers)
    vocabulary = sorted((a for a, n in counts.items() if n > 1), key=lambda a: (-counts[a], a))
    if not vocabulary:
        raise ConfigError("answer vocabulary is empty: no answer occurs more than once")
    return vocabulary
