"""Temporal referring samples over synthesized clip sequences.

Templates
---------
    what    "what happens in this video ?"      single clip; true caption + K-1 distractors
    begin   "what happens at the beginning ?"   all K captions, label C_1
    end     "what happens at the end ?"         all K captions, label C_K
    before  "what happens before C_i ?"         i in [2, K], other K-1 captions, label C_{i-1}
    after   "what happens after C_i ?"          i in [1, K-1], other K-1 captions, label C_{i+1}

Candidates are shuffled per sample. `derive_trm_label` re-derives the label
from the manifest and the question text alone and is used as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from dest_qa.config import TrainConfig
from dest_qa.numeric import Seeds
from dest_qa.utils.log import log
from dest_qa.world import (
    ClipRecord,
    EventVocab,
    Manifest,
    TokenVocab,
    gen_clip,
    kept_rows,
    sample_event_ids,
    synthesize_sequence,
)

DISTRACTOR_ATTEMPTS = 100


class Template(Enum):
    WHAT = "what"
    BEGIN = "begin"
    END = "end"
    BEFORE = "before"
    AFTER = "after"


TEMPLATES = tuple(Template)

QUESTION_PREFIX = {
    Template.WHAT: "what happens in this video ?",
    Template.BEGIN: "what happens at the beginning ?",
    Template.END: "what happens at the end ?",
    Template.BEFORE: "what happens before",
    Template.AFTER: "what happens after",
}


def question_tokens(tokens: TokenVocab, template: Template, reference: Sequence[int] = ()) -> list[int]:
    """Question token ids; before/after embed the referenced caption."""
    prefix = tokens.encode_text(QUESTION_PREFIX[template])
    if template in (Template.BEFORE, Template.AFTER):
        return prefix + list(reference) + tokens.encode(["?"])
    return prefix


@dataclass
class TrmSample:
    features: np.ndarray  # [M, H]
    question: list[int]
    template: Template
    reference: int | None  # 1-based clip index for before/after
    captions: list[list[int]]  # sequence captions in order, then distractors
    candidate_indices: list[int]  # into captions
    label: int  # into candidate_indices
    manifest: Manifest

    @property
    def candidates(self) -> list[list[int]]:
        return [self.captions[i] for i in self.candidate_indices]

    @property
    def target(self) -> list[int]:
        return self.candidates[self.label]

    @property
    def chance(self) -> float:
        return 1.0 / len(self.candidate_indices)


def _shuffled(candidates: list[int], answer: int, rng: np.random.Generator) -> tuple[list[int], int]:
    order = [candidates[i] for i in rng.permutation(len(candidates))]
    return order, order.index(answer)


def draw_distractors(
    truth: Sequence[int], pool: Sequence[Sequence[int]], count: int, rng: np.random.Generator
) -> list[list[int]]:
    """`count` captions from `pool`, pairwise distinct and different from `truth`.

    Raises:
        ValueError: if no distinct draw is found within the attempt limit.
    """
    truth = tuple(truth)
    for _ in range(DISTRACTOR_ATTEMPTS):
        picked = [tuple(pool[i]) for i in rng.integers(len(pool), size=count)]
        if len(set(picked)) == count and truth not in picked:
            return [list(p) for p in picked]
    raise ValueError(f"no {count} distinct distractors found after {DISTRACTOR_ATTEMPTS} attempts")


def gen_trm_sample(
    manifest: Manifest,
    features: np.ndarray,
    template: Template | str,
    rng: np.random.Generator,
    tokens: TokenVocab,
    distractor_pool: Sequence[Sequence[int]] = (),
    num_candidates: int | None = None,
) -> TrmSample:
    """Build one sample over an already synthesized sequence.

    For the what-template the manifest holds a single clip and
    `num_candidates - 1` distractors are drawn from `distractor_pool`.
    """
    template = Template(template)
    captions = manifest.captions
    K = len(manifest)
    if len({tuple(c) for c in captions}) != K:
        raise ValueError("duplicate captions in one sequence")

    reference = None
    if template is Template.WHAT:
        if K != 1:
            raise ValueError(f"what-template needs a single-clip video, got {K} clips")
        if num_candidates is None or num_candidates < 2:
            raise ValueError("what-template needs num_candidates >= 2")
        captions = captions + draw_distractors(captions[0], distractor_pool, num_candidates - 1, rng)
        candidates, label = _shuffled(list(range(num_candidates)), 0, rng)
        question = question_tokens(tokens, template)
    else:
        if K < 2:
            raise ValueError(f"{template.value}-template needs K >= 2 clips, got {K}")
        if template is Template.BEGIN:
            candidates, label = _shuffled(list(range(K)), 0, rng)
            question = question_tokens(tokens, template)
        elif template is Template.END:
            candidates, label = _shuffled(list(range(K)), K - 1, rng)
            question = question_tokens(tokens, template)
        else:
            if template is Template.AFTER:
                reference = int(rng.integers(1, K))  # [1, K-1]
                answer = reference  # 0-based index of C_{i+1}
            else:
                reference = int(rng.integers(2, K + 1))  # [2, K]
                answer = reference - 2  # 0-based index of C_{i-1}
            others = [j for j in range(K) if j != reference - 1]
            candidates, label = _shuffled(others, answer, rng)
            question = question_tokens(tokens, template, captions[reference - 1])

    return TrmSample(
        features=features,
        question=question,
        template=template,
        reference=reference,
        captions=[list(c) for c in captions],
        candidate_indices=candidates,
        label=label,
        manifest=manifest,
    )


def derive_trm_label(
    manifest: Manifest,
    template: Template | str,
    question: Sequence[int],
    candidates: Sequence[Sequence[int]],
    tokens: TokenVocab,
) -> int:
    """Label of a sample recomputed from the manifest and the question text only."""
    template = Template(template)
    order = [tuple(c) for c in manifest.captions]

    if template is Template.WHAT:
        truth = order[0]
    elif template is Template.BEGIN:
        truth = order[0]
    elif template is Template.END:
        truth = order[-1]
    else:
        prefix = len(tokens.encode_text(QUESTION_PREFIX[template]))
        referenced = tuple(question[prefix:-1])
        i = order.index(referenced)
        truth = order[i + 1] if template is Template.AFTER else order[i - 1]

    return [tuple(c) for c in candidates].index(truth)


def single_clip_video(clip, max_video_length: int) -> tuple[np.ndarray, Manifest]:
    keep = kept_rows([clip.duration], max_video_length)[0]
    record = ClipRecord(
        event_id=clip.event_id,
        caption=tuple(clip.caption),
        attribute_id=clip.attribute_id,
        start=0,
        length=len(keep),
    )
    return clip.features[keep], Manifest(records=(record,))


def gen_trm_item(
    vocab: EventVocab, config: TrainConfig, rng: np.random.Generator
) -> TrmSample:
    """One sample with a uniformly drawn template."""
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    K = config.num_videos_k
    if template is Template.WHAT:
        event = int(rng.integers(vocab.event_count))
        features, manifest = single_clip_video(gen_clip(vocab, event, rng), config.max_video_length)
        return gen_trm_sample(
            manifest, features, template, rng, vocab.tokens,
            distractor_pool=vocab.captions, num_candidates=K,
        )  # fmt: skip
    clips = [gen_clip(vocab, e, rng) for e in sample_event_ids(vocab.event_count, K, rng)]
    features, manifest = synthesize_sequence(clips, config.max_video_length)
    return gen_trm_sample(manifest, features, template, rng, vocab.tokens)


def gen_trm_dataset(
    vocab: EventVocab, config: TrainConfig, size: int, seeds: Seeds, purpose: int
) -> list[TrmSample]:
    """Sample i is a pure function of (seed, purpose, i)."""
    if size < 1:
        raise ValueError(f"dataset size must be >= 1, got {size}")
    samples = [gen_trm_item(vocab, config, seeds.data_rng(purpose, i)) for i in range(size)]
    log(f"generated {size} TRM samples (K={config.num_videos_k})")
    return samples
