"""Synthetic event world.

Every event has a feature signature (what a video feature extractor would
see while the event happens) and a two-word caption. Every clip also
carries a static attribute that is visible in its frame patches but not in
its video features, so spatial questions need the image-language stream and
temporal questions need the video-language stream.

Public API
----------
TokenVocab
    Word <-> token id table shared by questions, captions and answers.
EventVocab
    build_event_vocab(config, rng) -> EventVocab
    .caption(event_id), .answer_tokens(answer_id), .event_answer(event_id),
    .attribute_answer(attribute_id), .describe(answer_id)
Clip, gen_clip(vocab, event_id, rng, attribute_id=None) -> Clip
sample_event_ids(event_count, K, rng) -> list[int]
ClipRecord, Manifest
synthesize_sequence(clips, max_video_length) -> (features [M, H], Manifest)
sequence_frames(clips, max_video_length) -> frames [M, N, P]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from dest_qa.config import ConfigError, TrainConfig
from dest_qa.utils.log import log

PAD = "<pad>"
TEMPLATE_WORDS = (
    PAD,
    "what",
    "happens",
    "at",
    "the",
    "beginning",
    "end",
    "before",
    "after",
    "first",
    "last",
    "attribute",
    "is",
    "in",
    "this",
    "video",
    "?",
)

SIGNATURE_ATTEMPTS = 100


@dataclass(frozen=True)
class TokenVocab:
    words: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("TokenVocab: duplicate words")
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise ValueError(f"unknown word {e.args[0]!r}") from None

    def encode_text(self, text: str) -> list[int]:
        return self.encode(text.split())

    def decode(self, tokens: Sequence[int]) -> str:
        return " ".join(self.words[t] for t in tokens)


def caption_words(event_count: int) -> tuple[list[str], list[str]]:
    """Nouns and verbs whose pairs give every event a unique caption."""
    n_nouns = math.ceil(math.sqrt(event_count))
    n_verbs = math.ceil(event_count / n_nouns)
    return [f"noun{i}" for i in range(n_nouns)], [f"verb{i}" for i in range(n_verbs)]


def build_token_vocab(event_count: int, attribute_count: int) -> TokenVocab:
    nouns, verbs = caption_words(event_count)
    attributes = [f"attr{i}" for i in range(attribute_count)]
    return TokenVocab(words=TEMPLATE_WORDS + tuple(nouns) + tuple(verbs) + tuple(attributes))


def vocab_size_for(config: TrainConfig) -> int:
    return len(build_token_vocab(config.event_count, config.attribute_count))


@dataclass
class EventVocab:
    """Event signatures, captions and attribute patches of one world.

    Answer ids: event e answers as e, attribute a answers as event_count + a.
    """

    signatures: np.ndarray  # [E, H] float32
    attribute_patches: np.ndarray  # [A, P] float32
    tokens: TokenVocab
    captions: list[tuple[int, ...]]
    noise_scale: float
    duration_min: int
    duration_max: int
    patch_count: int

    @property
    def event_count(self) -> int:
        return self.signatures.shape[0]

    @property
    def attribute_count(self) -> int:
        return self.attribute_patches.shape[0]

    @property
    def feature_size(self) -> int:
        return self.signatures.shape[1]

    @property
    def answer_count(self) -> int:
        return self.event_count + self.attribute_count

    def caption(self, event_id: int) -> list[int]:
        self._check_event(event_id)
        return list(self.captions[event_id])

    def event_answer(self, event_id: int) -> int:
        self._check_event(event_id)
        return event_id

    def attribute_answer(self, attribute_id: int) -> int:
        self._check_attribute(attribute_id)
        return self.event_count + attribute_id

    def answer_tokens(self, answer_id: int) -> list[int]:
        if 0 <= answer_id < self.event_count:
            return self.caption(answer_id)
        if self.event_count <= answer_id < self.answer_count:
            return self.tokens.encode([f"attr{answer_id - self.event_count}"])
        raise ValueError(f"answer id {answer_id} outside [0, {self.answer_count})")

    def describe(self, answer_id: int) -> str:
        return self.tokens.decode(self.answer_tokens(answer_id))

    def to_dict(self) -> dict[str, Any]:
        return {
            "words": list(self.tokens.words),
            "captions": [list(c) for c in self.captions],
            "signatures": self.signatures.tolist(),
            "attribute_patches": self.attribute_patches.tolist(),
        }

    def _check_event(self, event_id: int) -> None:
        if not 0 <= event_id < self.event_count:
            raise ValueError(f"event id {event_id} outside [0, {self.event_count})")

    def _check_attribute(self, attribute_id: int) -> None:
        if not 0 <= attribute_id < self.attribute_count:
            raise ValueError(f"attribute id {attribute_id} outside [0, {self.attribute_count})")


def min_pairwise_distance(vectors: np.ndarray) -> float:
    diffs = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=-1))
    dist[np.diag_indices(len(vectors))] = np.inf
    return float(dist.min())


def build_event_vocab(config: TrainConfig, rng: np.random.Generator) -> EventVocab:
    """Seeded world: signatures N(0, 1) kept only when pairwise >= min_signature_distance.

    Raises:
        ConfigError: if no well-separated signature set is found.
    """
    for attempt in range(1, SIGNATURE_ATTEMPTS + 1):
        signatures = rng.standard_normal((config.event_count, config.feature_size))
        if min_pairwise_distance(signatures) >= config.min_signature_distance:
            break
    else:
        raise ConfigError(
            f"no signature set with pairwise distance >= {config.min_signature_distance} "
            f"after {SIGNATURE_ATTEMPTS} attempts; lower min_signature_distance or raise feature_size"
        )

    tokens = build_token_vocab(config.event_count, config.attribute_count)
    nouns, verbs = caption_words(config.event_count)
    captions = [
        tuple(tokens.encode([nouns[e // len(verbs)], verbs[e % len(verbs)]]))
        for e in range(config.event_count)
    ]
    attribute_patches = rng.standard_normal((config.attribute_count, config.patch_size))

    log(f"world: {config.event_count} events, {config.attribute_count} attributes, "
        f"{len(tokens)} tokens (signatures after {attempt} attempt(s))")  # fmt: skip
    return EventVocab(
        signatures=signatures.astype(np.float32),
        attribute_patches=attribute_patches.astype(np.float32),
        tokens=tokens,
        captions=captions,
        noise_scale=config.noise_scale,
        duration_min=config.duration_min,
        duration_max=config.duration_max,
        patch_count=config.patch_count,
    )


@dataclass
class Clip:
    event_id: int
    duration: int
    features: np.ndarray  # [duration, H]
    caption: list[int]
    attribute_id: int
    frames: np.ndarray  # [duration, N, P]


def gen_clip(
    vocab: EventVocab, event_id: int, rng: np.random.Generator, attribute_id: int | None = None
) -> Clip:
    """One clip: signature plus Gaussian noise per timestep, attribute in every frame patch.

    Noise sigma is noise_scale * ||signature|| / sqrt(H); the same relative
    scale is used for frame patches.
    """
    vocab._check_event(event_id)
    if attribute_id is not None:
        vocab._check_attribute(attribute_id)

    duration = int(rng.integers(vocab.duration_min, vocab.duration_max + 1))
    if attribute_id is None:
        attribute_id = int(rng.integers(vocab.attribute_count))

    signature = vocab.signatures[event_id]
    sigma = vocab.noise_scale * np.linalg.norm(signature) / math.sqrt(signature.shape[0])
    features = signature[None, :] + sigma * rng.standard_normal((duration, signature.shape[0]))

    patch = vocab.attribute_patches[attribute_id]
    patch_sigma = vocab.noise_scale * np.linalg.norm(patch) / math.sqrt(patch.shape[0])
    frames = patch[None, None, :] + patch_sigma * rng.standard_normal(
        (duration, vocab.patch_count, patch.shape[0])
    )

    return Clip(
        event_id=event_id,
        duration=duration,
        features=features.astype(np.float32),
        caption=vocab.caption(event_id),
        attribute_id=attribute_id,
        frames=frames.astype(np.float32),
    )


def sample_event_ids(event_count: int, K: int, rng: np.random.Generator) -> list[int]:
    """K distinct events, so captions in a sequence never repeat."""
    if not 1 <= K <= event_count:
        raise ValueError(f"cannot draw {K} distinct events from {event_count}")
    return [int(e) for e in rng.choice(event_count, size=K, replace=False)]


@dataclass(frozen=True)
class ClipRecord:
    event_id: int
    caption: tuple[int, ...]
    attribute_id: int
    start: int
    length: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "caption": list(self.caption),
            "attribute_id": self.attribute_id,
            "start": self.start,
            "length": self.length,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ClipRecord:
        return cls(
            event_id=int(data["event_id"]),
            caption=tuple(data["caption"]),
            attribute_id=int(data["attribute_id"]),
            start=int(data["start"]),
            length=int(data["length"]),
        )


@dataclass(frozen=True)
class Manifest:
    """Ground-truth clip order and boundaries of one synthesized sequence."""

    records: tuple[ClipRecord, ...]

    def __post_init__(self):
        if not self.records:
            raise ValueError("manifest has no clips")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def boundaries(self) -> list[int]:
        return [r.start for r in self.records] + [self.total_length]

    @property
    def total_length(self) -> int:
        last = self.records[-1]
        return last.start + last.length

    @property
    def captions(self) -> list[list[int]]:
        return [list(r.caption) for r in self.records]

    @property
    def event_ids(self) -> list[int]:
        return [r.event_id for r in self.records]

    def to_list(self) -> list[dict[str, Any]]:
        return [r.to_dict() for r in self.records]

    @classmethod
    def from_list(cls, data: list[dict[str, Any]]) -> Manifest:
        return cls(records=tuple(ClipRecord.from_dict(d) for d in data))


def kept_rows(lengths: Sequence[int], max_video_length: int) -> list[np.ndarray]:
    """Row indices kept per clip so the total fits max_video_length.

    Each clip keeps max(1, floor(len * max / M)) evenly spaced rows.
    """
    total = sum(lengths)
    if total <= max_video_length:
        return [np.arange(n) for n in lengths]
    if len(lengths) > max_video_length:
        raise ValueError(f"{len(lengths)} clips cannot fit in {max_video_length} rows")

    kept = [max(1, math.floor(n * max_video_length / total)) for n in lengths]
    while sum(kept) > max_video_length:
        kept[int(np.argmax(kept))] -= 1
    return [np.linspace(0, n - 1, k).round().astype(np.int64) for n, k in zip(lengths, kept)]


def synthesize_sequence(
    clips: Sequence[Clip], max_video_length: int
) -> tuple[np.ndarray, Manifest]:
    """Concatenate clip features in order; subsample per clip when too long."""
    if len(clips) < 2:
        raise ValueError(f"synthesize_sequence needs K >= 2 clips, got {len(clips)}")
    for a, b in zip(clips, clips[1:]):
        if a.event_id == b.event_id:
            raise ValueError(f"adjacent clips share event {a.event_id}")

    rows = kept_rows([c.duration for c in clips], max_video_length)
    parts, records, start = [], [], 0
    for clip, keep in zip(clips, rows):
        parts.append(clip.features[keep])
        records.append(
            ClipRecord(
                event_id=clip.event_id,
                caption=tuple(clip.caption),
                attribute_id=clip.attribute_id,
                start=start,
                length=len(keep),
            )
        )
        start += len(keep)
    return np.concatenate(parts, axis=0), Manifest(records=tuple(records))


def sequence_frames(clips: Sequence[Clip], max_video_length: int) -> np.ndarray:
    """Frame patches aligned with the rows synthesize_sequence keeps."""
    rows = kept_rows([c.duration for c in clips], max_video_length)
    return np.concatenate([c.frames[keep] for c, keep in zip(clips, rows)], axis=0)
