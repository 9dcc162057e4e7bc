"""Predictors that answer TRM and QA samples.

A prediction is a candidate index for a TrmSample and an answer id for a
QaSample, so it can be compared directly with `expected_answer(sample)`.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from dest_qa.batching import chunks, collate_qa, collate_trm
from dest_qa.checkpoint import Checkpoint, load_checkpoint
from dest_qa.config import TrainConfig
from dest_qa.pipeline import AnswerBank, DestModel, Mode, StreamMask
from dest_qa.qa import QaSample, derive_qa_answer
from dest_qa.trainer import qa_forward, trm_forward
from dest_qa.trm import TrmSample, derive_trm_label
from dest_qa.world import build_token_vocab

Sample = TrmSample | QaSample


def expected_answer(sample: Sample) -> int:
    return sample.label if isinstance(sample, TrmSample) else sample.answer


class Predictor(ABC):
    """Abstract base class for predictors."""

    @property
    @abstractmethod
    def name(self) -> str:
        """Return the predictor identifier as 'kind[:detail]'."""
        pass

    @abstractmethod
    def predict(self, samples: Sequence[Sample], mask: StreamMask = StreamMask.BOTH) -> list[int]:
        """One prediction per sample, in sample order."""
        pass


def create_predictor(
    spec: str, config: TrainConfig, answer_vocabulary: Sequence[int] | None = None
) -> Predictor:
    """Create a predictor from a spec string.

    Args:
        spec: "checkpoint:<path>", "oracle" or "random[:<seed>]".
        config: run config; checkpoints must be compatible with it.
        answer_vocabulary: answer pool of the random predictor on QA samples.

    Raises:
        ValueError: If the kind is not recognized.
    """
    parts = spec.split(":", 1)
    kind = parts[0].lower()
    detail = parts[1] if len(parts) > 1 else None

    if kind == "checkpoint":
        if not detail:
            raise ValueError("checkpoint predictor needs a path: checkpoint:<path>")
        return CheckpointPredictor(load_checkpoint(Path(detail)), config)
    if kind == "oracle":
        return OraclePredictor(config)
    if kind == "random":
        return RandomPredictor(config, int(detail) if detail else config.seed, answer_vocabulary)
    raise ValueError(f"Unknown predictor: {kind}. Must be one of: checkpoint, oracle, random")


class CheckpointPredictor(Predictor):
    def __init__(self, checkpoint: Checkpoint, config: TrainConfig | None = None):
        self.checkpoint = checkpoint
        self.model = checkpoint.build(config)
        self.eval_frames = checkpoint.config.num_frames_t_eval
        self.batch_size = checkpoint.config.batch_size

    @property
    def name(self) -> str:
        return f"checkpoint:{self.checkpoint.stage}@{self.checkpoint.step}"

    @torch.no_grad()
    def predict(self, samples: Sequence[Sample], mask: StreamMask = StreamMask.BOTH) -> list[int]:
        self.model.eval()
        predictions: list[int] = []
        answers = None
        for rows in chunks(len(samples), self.batch_size):
            batch = [samples[i] for i in rows]
            if isinstance(batch[0], TrmSample):
                if not isinstance(self.model, DestModel):
                    raise ValueError(f"{self.model.kind} model cannot answer TRM samples")
                out = trm_forward(self.model, collate_trm(batch))
                predictions += out.logits.argmax(dim=-1).tolist()
                continue
            vocabulary = self.checkpoint.answer_vocabulary
            if not vocabulary:
                raise ValueError("checkpoint has no answer vocabulary; fine-tune it first")
            if answers is None:
                answers = AnswerBank(self.model.encode_answers(self.checkpoint.answer_tokens))
            logits = qa_forward(self.model, collate_qa(batch, self.eval_frames, Mode.EVAL), answers, mask)
            predictions += [vocabulary[i] for i in logits.argmax(dim=-1).tolist()]
        return predictions


class OraclePredictor(Predictor):
    """Reads the answer off the ground-truth manifest."""

    def __init__(self, config: TrainConfig):
        self.tokens = build_token_vocab(config.event_count, config.attribute_count)
        self.event_count = config.event_count

    @property
    def name(self) -> str:
        return "oracle"

    def predict(self, samples: Sequence[Sample], mask: StreamMask = StreamMask.BOTH) -> list[int]:
        return [
            derive_trm_label(s.manifest, s.template, s.question, s.candidates, self.tokens)
            if isinstance(s, TrmSample)
            else derive_qa_answer(s.manifest, s.template, s.question, self.tokens, self.event_count)
            for s in samples
        ]


class RandomPredictor(Predictor):
    """Uniform over the candidates (TRM) or the answer pool (QA)."""

    def __init__(self, config: TrainConfig, seed: int, answer_vocabulary: Sequence[int] | None = None):
        self.seed = seed
        self.answers = list(answer_vocabulary or range(config.event_count + config.attribute_count))

    @property
    def name(self) -> str:
        return f"random:{self.seed}"

    def predict(self, samples: Sequence[Sample], mask: StreamMask = StreamMask.BOTH) -> list[int]:
        rng = np.random.default_rng(self.seed)
        return [
            int(rng.integers(len(s.candidate_indices)))
            if isinstance(s, TrmSample)
            else self.answers[int(rng.integers(len(self.answers)))]
            for s in samples
        ]
