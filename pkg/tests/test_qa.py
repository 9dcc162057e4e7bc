from collections import Counter

import numpy as np
import pytest

from dest_qa.config import ConfigError
from dest_qa.numeric import DATA_QA_TRAIN
from dest_qa.qa import (
    SPATIAL_TEMPLATE,
    TEMPORAL_TEMPLATES,
    QuestionType,
    build_answer_vocabulary,
    derive_qa_answer,
    gen_downstream_dataset,
    gen_qa_sample,
    qa_question,
    spatial_only,
)


def test_questions_read_back(world):
    tokens = world.tokens
    assert tokens.decode(qa_question(tokens, SPATIAL_TEMPLATE)) == "what attribute is in this video ?"
    assert tokens.decode(qa_question(tokens, "last")) == "what happens last ?"
    assert tokens.decode(qa_question(tokens, "before", world.caption(1))) == "what happens before noun0 verb1 ?"


def test_types_alternate(qa_train):
    assert [s.question_type for s in qa_train[:4]] == [
        QuestionType.TEMPORAL, QuestionType.SPATIAL, QuestionType.TEMPORAL, QuestionType.SPATIAL,
    ]  # fmt: skip
    assert len(spatial_only(qa_train)) == 20


def test_answers_match_oracle(world, qa_train, qa_test):
    for s in qa_train + qa_test:
        assert derive_qa_answer(s.manifest, s.template, s.question, world.tokens, world.event_count) == s.answer


def test_spatial_answers_are_attributes(world, qa_train):
    for s in spatial_only(qa_train):
        assert s.template == SPATIAL_TEMPLATE
        assert s.answer == world.attribute_answer(s.attribute_id)
        assert {r.attribute_id for r in s.manifest.records} == {s.attribute_id}


def test_temporal_answers_are_events(world, qa_train):
    temporal = [s for s in qa_train if s.question_type is QuestionType.TEMPORAL]
    assert {s.template for s in temporal} <= set(TEMPORAL_TEMPLATES)
    for s in temporal:
        assert 0 <= s.answer < world.event_count
        assert s.answer in s.manifest.event_ids


def test_frames_align_with_features(qa_train, tiny_config):
    for s in qa_train:
        assert s.frames.shape == (s.features.shape[0], tiny_config.patch_count, tiny_config.patch_size)
        assert s.frame_count == s.manifest.total_length


def test_first_and_last_by_hand(world, tiny_config):
    for seed in range(30):
        s = gen_qa_sample(world, tiny_config, QuestionType.TEMPORAL, np.random.default_rng(seed))
        if s.template == "first":
            assert s.answer == s.manifest.event_ids[0]
        elif s.template == "last":
            assert s.answer == s.manifest.event_ids[-1]
        elif s.template == "after":
            i = s.manifest.captions.index(s.question[-3:-1])
            assert s.answer == s.manifest.event_ids[i + 1]


def test_dataset_is_reproducible(world, tiny_config, seeds):
    a = gen_downstream_dataset(world, tiny_config, 6, seeds, DATA_QA_TRAIN)
    b = gen_downstream_dataset(world, tiny_config, 6, seeds, DATA_QA_TRAIN)
    assert [s.answer for s in a] == [s.answer for s in b]
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        gen_downstream_dataset(world, tiny_config, 0, seeds, DATA_QA_TRAIN)


def test_answer_vocabulary_keeps_repeated_answers():
    assert build_answer_vocabulary([3, 1, 1, 3, 3, 7, 2, 2]) == [3, 1, 2]


def test_answer_vocabulary_from_samples(qa_train):
    vocabulary = build_answer_vocabulary(qa_train)
    counts = Counter(s.answer for s in qa_train)
    assert all(counts[a] > 1 for a in vocabulary)
    assert [counts[a] for a in vocabulary] == sorted((counts[a] for a in vocabulary), reverse=True)


def test_answer_vocabulary_errors():
    with pytest.raises(ValueError, match="no samples"):
        build_answer_vocabulary([])
    with pytest.raises(ConfigError, match="empty"):
        build_answer_vocabulary([1, 2, 3])


@pytest.mark.slow
def test_oracle_agrees_at_scale(world, tiny_config, seeds):
    for s in gen_downstream_dataset(world, tiny_config, 100_000, seeds, DATA_QA_TRAIN):
        assert derive_qa_answer(s.manifest, s.template, s.question, world.tokens, world.event_count) == s.answer
