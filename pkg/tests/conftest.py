import numpy as np
import pytest
import torch

from dest_qa.config import TrainConfig
from dest_qa.numeric import DATA_QA_EVAL, DATA_QA_TRAIN, DATA_TRM_TRAIN, DATA_WORLD, Seeds
from dest_qa.pipeline import build_model
from dest_qa.qa import gen_downstream_dataset
from dest_qa.trm import gen_trm_dataset
from dest_qa.world import build_event_vocab, vocab_size_for


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_tiny_config(**overrides) -> TrainConfig:
    values = dict(
        embedding_size=16,
        num_layers=1,
        num_heads=2,
        ffn_size=32,
        dropout=0.0,
        feature_size=8,
        patch_count=2,
        patch_size=8,
        max_video_length=24,
        max_question_length=10,
        num_videos_k=3,
        num_frames_t=2,
        num_frames_t_eval=2,
        event_count=6,
        attribute_count=3,
        batch_size=8,
        training_steps=20,
        training_epochs=1,
        pretrain_samples=40,
        pretrain_eval_samples=20,
        finetune_samples=40,
        eval_samples=20,
        log_interval=5,
        checkpoint_interval=10,
        seed=7,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return make_tiny_config()


@pytest.fixture
def seeds(tiny_config) -> Seeds:
    return Seeds.from_seed(tiny_config.seed)


@pytest.fixture
def world(tiny_config, seeds):
    return build_event_vocab(tiny_config, seeds.data_rng(DATA_WORLD))


@pytest.fixture
def vocab_size(tiny_config) -> int:
    return vocab_size_for(tiny_config)


@pytest.fixture
def model(tiny_config, vocab_size):
    m = build_model(tiny_config, vocab_size, generator=torch.Generator().manual_seed(0))
    m.eval()
    return m


@pytest.fixture
def trm_samples(world, tiny_config, seeds):
    return gen_trm_dataset(world, tiny_config, 40, seeds, DATA_TRM_TRAIN)


@pytest.fixture
def qa_train(world, tiny_config, seeds):
    return gen_downstream_dataset(world, tiny_config, 40, seeds, DATA_QA_TRAIN)


@pytest.fixture
def qa_test(world, tiny_config, seeds):
    return gen_downstream_dataset(world, tiny_config, 20, seeds, DATA_QA_EVAL)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
