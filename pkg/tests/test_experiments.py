import csv

import pytest

from conftest import make_tiny_config
from dest_qa.config import TrainConfig
from dest_qa.evaluation import evaluate, stream_ablation
from dest_qa.experiments import (
    SWEEP_COLUMNS,
    build_downstream,
    build_world,
    gradcheck_config,
    gradcheck_dest,
    run_experiment,
    sweep,
)
from dest_qa.numeric import DATA_TRM_EVAL, DATA_TRM_TRAIN, Seeds
from dest_qa.pipeline import QuestionOnlyModel
from dest_qa.predictors import CheckpointPredictor
from dest_qa.trainer import pretrain
from dest_qa.trm import gen_trm_dataset
from dest_qa.world import vocab_size_for

FAST = dict(training_steps=4, pretrain_samples=16, pretrain_eval_samples=8, finetune_samples=24, eval_samples=12)


def test_downstream_data(tiny_config, seeds):
    world = build_world(tiny_config, seeds)
    data = build_downstream(world, tiny_config, seeds)
    assert len(data.train) == tiny_config.finetune_samples
    assert len(data.test) == tiny_config.eval_samples
    assert len(data.answer_tokens) == len(data.vocabulary)
    assert data.answer_tokens[0] == world.answer_tokens(data.vocabulary[0])


def test_run_experiment_end_to_end(tmp_path):
    config = make_tiny_config(**FAST)
    result = run_experiment(config, tmp_path, shuffle_seeds=2)
    assert result.pretrain.checkpoint.stage == "pretrain"
    assert result.finetune.checkpoint.extra["init"] == "trm"
    assert result.trm_report.split == "trm_eval"
    assert result.qa_report.total == 12
    assert len(result.shuffle.shuffled) == 2
    assert set(result.upper_bound) == {"spatial", "temporal", "overall"}
    assert (tmp_path / "pretrain.dstc").exists() and (tmp_path / "finetune.dstc").exists()


def test_run_experiment_question_only_skips_pretraining():
    config = make_tiny_config(**FAST)
    result = run_experiment(config, kind=QuestionOnlyModel.kind, shuffle_seeds=0)
    assert result.pretrain is None and result.trm_report is None and result.shuffle is None
    assert result.finetune.checkpoint.kind == "question_only"


def test_sweep_over_k(tmp_path):
    rows = sweep("K", [2, 3], make_tiny_config(**FAST), tmp_path)
    assert {row[1] for row in rows} == {2, 3}
    assert all(len(row) == len(SWEEP_COLUMNS) for row in rows)
    with (tmp_path / "sweep-K.csv").open(newline="") as f:
        written = list(csv.reader(f))
    assert tuple(written[0]) == SWEEP_COLUMNS
    assert len(written) == len(rows) + 1
    assert (tmp_path / "K=2" / "finetune.dstc").exists()


def test_sweep_over_t_without_pretraining():
    rows = sweep("T", [1], make_tiny_config(**FAST), with_trm=False)
    assert {row[2] for row in rows} == {"test"}


def test_sweep_errors():
    with pytest.raises(ValueError, match="Unknown sweep axis"):
        sweep("D", [1], make_tiny_config())
    with pytest.raises(ValueError, match="no values"):
        sweep("T", [], make_tiny_config())


def test_gradcheck_config_is_small():
    config = gradcheck_config(3)
    assert config.seed == 3
    assert config.dropout == 0.0
    assert config.loss_weighting == "uncertainty"
    assert vocab_size_for(config) == 23


@pytest.mark.slow
def test_full_model_gradients_match_finite_differences():
    report = gradcheck_dest(seed=0)
    assert report.passed, report.summary()


@pytest.mark.slow
def test_question_only_stays_near_chance():
    config = make_tiny_config(finetune_samples=600, eval_samples=2000, training_epochs=5)
    result = run_experiment(config, kind=QuestionOnlyModel.kind, shuffle_seeds=0)
    assert abs(result.qa_report.accuracy("spatial") - 1 / config.attribute_count) < 0.05
    assert abs(result.qa_report.accuracy("temporal") - 1 / config.event_count) < 0.05


ACCEPTANCE = dict(embedding_size=64, num_layers=2, num_heads=4, ffn_size=256, seed=0)


def held_out_trm_accuracy(config):
    seeds = Seeds.from_seed(config.seed)
    world = build_world(config, seeds)
    train = gen_trm_dataset(world, config, config.pretrain_samples, seeds, DATA_TRM_TRAIN)
    held_out = gen_trm_dataset(world, config, config.pretrain_eval_samples, seeds, DATA_TRM_EVAL)
    checkpoint = pretrain(config, train, len(world.tokens), seeds).checkpoint
    return evaluate(CheckpointPredictor(checkpoint), held_out, split="trm_eval").overall


@pytest.mark.slow
def test_trm_is_learnable():
    assert held_out_trm_accuracy(TrainConfig(**ACCEPTANCE)) >= 0.9


@pytest.mark.slow
def test_loss_weightings_reach_similar_trm_accuracy():
    unweighted = held_out_trm_accuracy(TrainConfig(**ACCEPTANCE, loss_weighting="unweighted"))
    uncertainty = held_out_trm_accuracy(TrainConfig(**ACCEPTANCE, loss_weighting="uncertainty"))
    assert abs(unweighted - uncertainty) <= 0.05


@pytest.mark.slow
def test_trm_pretraining_makes_temporal_answers_order_sensitive():
    config = TrainConfig(**ACCEPTANCE)
    pretrained = run_experiment(config, shuffle_seeds=3).shuffle
    scratch = run_experiment(config, with_trm=False, shuffle_seeds=3).shuffle
    assert pretrained.drop("spatial") <= 0.05
    assert pretrained.drop("temporal") > scratch.drop("temporal")


@pytest.mark.slow
def test_both_streams_beat_either_alone():
    config = TrainConfig(**ACCEPTANCE)
    result = run_experiment(config, shuffle_seeds=0)
    seeds = Seeds.from_seed(config.seed)
    test = build_downstream(build_world(config, seeds), config, seeds).test
    reports = stream_ablation(CheckpointPredictor(result.finetune.checkpoint), test)
    assert reports["il"].overall < reports["both"].overall
    assert reports["vl"].overall < reports["both"].overall
