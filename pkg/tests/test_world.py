import numpy as np
import pytest

from conftest import make_tiny_config
from dest_qa.config import ConfigError
from dest_qa.world import (
    TEMPLATE_WORDS,
    Manifest,
    TokenVocab,
    build_event_vocab,
    caption_words,
    gen_clip,
    kept_rows,
    min_pairwise_distance,
    sample_event_ids,
    sequence_frames,
    synthesize_sequence,
    vocab_size_for,
)


def test_token_vocab_round_trip():
    tokens = TokenVocab(TEMPLATE_WORDS)
    ids = tokens.encode_text("what happens at the end ?")
    assert ids == [1, 2, 3, 4, 6, 16]
    assert tokens.decode(ids) == "what happens at the end ?"
    with pytest.raises(ValueError, match="unknown word"):
        tokens.encode(["whence"])
    with pytest.raises(ValueError, match="duplicate"):
        TokenVocab(("a", "a"))


def test_caption_words_cover_every_event():
    nouns, verbs = caption_words(6)
    assert (len(nouns), len(verbs)) == (3, 2)
    nouns, verbs = caption_words(16)
    assert len(nouns) * len(verbs) >= 16


def test_vocab_size(tiny_config):
    assert vocab_size_for(tiny_config) == 25


def test_world_is_seeded(tiny_config):
    a = build_event_vocab(tiny_config, np.random.default_rng(1))
    b = build_event_vocab(tiny_config, np.random.default_rng(1))
    assert np.array_equal(a.signatures, b.signatures)
    assert np.array_equal(a.attribute_patches, b.attribute_patches)
    assert a.signatures.dtype == np.float32
    assert a.signatures.shape == (6, 8)
    assert a.attribute_patches.shape == (3, 8)


def test_world_captions_are_unique_and_well_separated(world, tiny_config):
    assert len({tuple(c) for c in world.captions}) == world.event_count
    assert min_pairwise_distance(world.signatures.astype(np.float64)) >= tiny_config.min_signature_distance - 1e-5


def test_world_rejects_unreachable_separation():
    config = make_tiny_config(feature_size=1, min_signature_distance=50.0)
    with pytest.raises(ConfigError, match="pairwise distance"):
        build_event_vocab(config, np.random.default_rng(0))


def test_answer_ids(world):
    assert world.event_answer(2) == 2
    assert world.attribute_answer(1) == world.event_count + 1
    assert world.answer_tokens(3) == world.caption(3)
    assert world.describe(world.attribute_answer(0)) == "attr0"
    assert world.describe(0) == "noun0 verb0"
    with pytest.raises(ValueError):
        world.answer_tokens(world.answer_count)
    with pytest.raises(ValueError):
        world.caption(-1)
    with pytest.raises(ValueError):
        world.attribute_answer(3)


def test_gen_clip_shapes_and_noise(world):
    clip = gen_clip(world, 4, np.random.default_rng(0), attribute_id=2)
    assert world.duration_min <= clip.duration <= world.duration_max
    assert clip.features.shape == (clip.duration, 8)
    assert clip.frames.shape == (clip.duration, 2, 8)
    assert clip.attribute_id == 2
    assert clip.caption == world.caption(4)
    signature = world.signatures[4]
    sigma = world.noise_scale * np.linalg.norm(signature) / np.sqrt(8)
    assert np.abs(clip.features - signature).max() < 6 * sigma


def test_gen_clip_is_deterministic(world):
    a = gen_clip(world, 1, np.random.default_rng(5))
    b = gen_clip(world, 1, np.random.default_rng(5))
    assert a.duration == b.duration and a.attribute_id == b.attribute_id
    assert np.array_equal(a.features, b.features)


def test_sample_event_ids_distinct():
    ids = sample_event_ids(6, 6, np.random.default_rng(0))
    assert sorted(ids) == list(range(6))
    with pytest.raises(ValueError):
        sample_event_ids(3, 4, np.random.default_rng(0))


def test_kept_rows_fit_max_video_length():
    assert [r.tolist() for r in kept_rows([2, 3], 10)] == [[0, 1], [0, 1, 2]]
    rows = kept_rows([6, 6, 6], 9)
    assert [len(r) for r in rows] == [3, 3, 3]
    assert rows[0].tolist() == [0, 2, 5]
    assert all(r[0] == 0 and r[-1] == 5 for r in rows)
    tight = kept_rows([10, 1, 1], 3)
    assert [len(r) for r in tight] == [1, 1, 1]
    with pytest.raises(ValueError):
        kept_rows([1, 1, 1], 2)


def test_synthesize_sequence_boundaries(world):
    rng = np.random.default_rng(0)
    clips = [gen_clip(world, e, rng) for e in (0, 3, 5)]
    features, manifest = synthesize_sequence(clips, 100)
    lengths = [c.duration for c in clips]
    assert features.shape == (sum(lengths), 8)
    assert manifest.boundaries == [0, lengths[0], lengths[0] + lengths[1], sum(lengths)]
    assert manifest.event_ids == [0, 3, 5]
    assert manifest.captions == [world.caption(e) for e in (0, 3, 5)]
    assert np.array_equal(features[: lengths[0]], clips[0].features)
    assert Manifest.from_list(manifest.to_list()) == manifest


def test_synthesize_sequence_subsamples(world):
    rng = np.random.default_rng(1)
    clips = [gen_clip(world, e, rng) for e in (0, 1, 2, 3)]
    features, manifest = synthesize_sequence(clips, 5)
    assert features.shape[0] == manifest.total_length <= 5
    assert all(r.length >= 1 for r in manifest.records)
    assert sequence_frames(clips, 5).shape[0] == features.shape[0]


def test_synthesize_sequence_errors(world):
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError, match="K >= 2"):
        synthesize_sequence([gen_clip(world, 0, rng)], 10)
    with pytest.raises(ValueError, match="share event"):
        synthesize_sequence([gen_clip(world, 1, rng), gen_clip(world, 1, rng)], 10)
