import csv

import pytest
import torch

from conftest import make_tiny_config
from dest_qa.checkpoint import load_checkpoint
from dest_qa.numeric import DATA_TRM_TRAIN, NumericError
from dest_qa.pipeline import QuestionOnlyModel, StreamMask
from dest_qa.qa import build_answer_vocabulary
from dest_qa.trainer import (
    FINETUNE_COLUMNS,
    PRETRAIN_COLUMNS,
    MetricsLog,
    build_optimizer,
    clip_means,
    finetune,
    initialize_from,
    pretrain,
)
from dest_qa.trm import gen_trm_dataset
from dest_qa.world import vocab_size_for


@pytest.fixture
def vocabulary(world, qa_train):
    answers = build_answer_vocabulary(qa_train)
    return answers, [world.answer_tokens(a) for a in answers]


def read_rows(path):
    with path.open(newline="") as f:
        return list(csv.reader(f))


def test_optimizer_groups(model, tiny_config):
    optimizer = build_optimizer(model, tiny_config)
    groups = {g["name"]: g for g in optimizer.param_groups}
    assert set(groups) == {
        "base", "base.no_decay", "video", "video.no_decay", "mlp", "mlp.no_decay", "ans", "ans.no_decay",
    }  # fmt: skip
    assert groups["video"]["peak_lr"] == tiny_config.lr_video
    assert groups["ans.no_decay"]["weight_decay"] == 0.0
    assert groups["base"]["weight_decay"] == tiny_config.weight_decay
    embedding = model.question_encoder.token_embedding.weight
    assert any(p is embedding for p in groups["base.no_decay"]["params"])
    assert sum(len(g["params"]) for g in optimizer.param_groups) == len(list(model.parameters()))


def test_metrics_log_averages_interval(tmp_path):
    path = tmp_path / "m.csv"
    metrics = MetricsLog(path, ("step", "loss"))
    metrics.add({"step": 0, "loss": 1.0})
    metrics.add({"step": 1, "loss": 3.0})
    assert metrics.flush(2) == {"step": 2, "loss": 2.0}
    assert metrics.flush(3) == {}
    assert read_rows(path) == [["step", "loss"], ["2", "2.0"]]


def test_clip_means_skip_bos():
    contextualized = torch.arange(6, dtype=torch.float32).reshape(1, 6, 1)
    means = clip_means(contextualized, [[0, 1, 4]])
    assert means.squeeze(-1).tolist() == [1.0, 3.0]


def test_pretrain_writes_metrics_and_checkpoints(tmp_path, tiny_config, trm_samples, vocab_size, seeds):
    result = pretrain(tiny_config, trm_samples, vocab_size, seeds, tmp_path)
    assert len(result.history) == tiny_config.training_steps
    assert result.checkpoint.step == tiny_config.training_steps
    assert result.checkpoint.stage == "pretrain"
    assert (tmp_path / "pretrain.dstc").exists()
    assert (tmp_path / "pretrain-latest.dstc").exists()

    rows = read_rows(result.metrics_path)
    assert tuple(rows[0]) == PRETRAIN_COLUMNS
    assert [r[0] for r in rows[1:]] == ["5", "10", "15", "20"]
    for row in result.history:
        assert row["loss_total"] == pytest.approx(row["loss_trm"] + row["loss_align"], rel=1e-5)
    assert result.history[0]["lr"] == 0.0


def test_pretrain_is_deterministic(tmp_path, tiny_config, trm_samples, vocab_size, seeds):
    config = tiny_config.replace(training_steps=4, dropout=0.1, log_interval=1)
    a = pretrain(config, trm_samples, vocab_size, seeds, tmp_path / "a")
    b = pretrain(config, trm_samples, vocab_size, seeds, tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert [r["loss_total"] for r in a.history] == [r["loss_total"] for r in b.history]


def test_pretrain_resumes_exactly(tmp_path, tiny_config, trm_samples, vocab_size, seeds):
    full = pretrain(tiny_config, trm_samples, vocab_size, seeds, tmp_path / "full")
    latest = load_checkpoint(tmp_path / "full" / "pretrain-latest.dstc")
    assert latest.step == 10
    resumed = pretrain(tiny_config, trm_samples, vocab_size, seeds, tmp_path / "resumed", resume=latest)
    assert [r["step"] for r in resumed.history] == list(range(10, 20))
    for a, b in zip(full.history[10:], resumed.history):
        assert b["loss_total"] == pytest.approx(a["loss_total"], rel=1e-6)


def test_resume_in_place_does_not_duplicate_metrics(tmp_path, tiny_config, trm_samples, vocab_size, seeds):
    pretrain(tiny_config, trm_samples, vocab_size, seeds, tmp_path)
    before = read_rows(tmp_path / "metrics-pretrain.csv")
    latest = load_checkpoint(tmp_path / "pretrain-latest.dstc")
    pretrain(tiny_config, trm_samples, vocab_size, seeds, tmp_path, resume=latest)
    after = read_rows(tmp_path / "metrics-pretrain.csv")
    assert [r[0] for r in after[1:]] == ["5", "10", "15", "20"]
    assert after[:3] == before[:3]


def test_metrics_log_keeps_rows_up_to_resume_step(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("step,loss\n5,1.0\n10,0.5\n15,0.25\n")
    MetricsLog(path, ("step", "loss"), resume_step=10)
    assert read_rows(path) == [["step", "loss"], ["5", "1.0"], ["10", "0.5"]]


def test_non_finite_loss_saves_last_good_state(tmp_path, monkeypatch, tiny_config, trm_samples, vocab_size, seeds):
    def exploding(model, batch):
        loss = sum(p.sum() for p in model.parameters()) * float("nan")
        return loss, {"loss_trm": 0.0, "loss_align": 0.0, "loss_total": 0.0, "trm_acc": 0.0}

    monkeypatch.setattr("dest_qa.trainer.trm_losses", exploding)
    with pytest.raises(NumericError, match="step 0"):
        pretrain(tiny_config, trm_samples, vocab_size, seeds, tmp_path)
    assert load_checkpoint(tmp_path / "pretrain-last_good.dstc").step == 0


def test_finetune_from_pretrained(tmp_path, tiny_config, trm_samples, qa_train, vocabulary, vocab_size, seeds):
    answers, tokens = vocabulary
    pre = pretrain(tiny_config.replace(training_steps=2), trm_samples, vocab_size, seeds)
    result = finetune(tiny_config, qa_train, answers, tokens, vocab_size, seeds, tmp_path, pretrained=pre.checkpoint)
    assert len(result.history) == 5
    assert result.checkpoint.answer_vocabulary == answers
    assert result.checkpoint.extra == {"init": "trm", "mask": "both", "il_warmup": False}
    assert tuple(read_rows(tmp_path / "metrics-finetune.csv")[0]) == FINETUNE_COLUMNS
    assert all(row["skipped"] >= 0 for row in result.history)


def test_initialize_from_copies_shared_tensors(tiny_config, trm_samples, vocab_size, seeds):
    pre = pretrain(tiny_config.replace(training_steps=1), trm_samples, vocab_size, seeds)
    model = QuestionOnlyModel(tiny_config, vocab_size)
    copied = initialize_from(model, pre.checkpoint, tiny_config)
    assert copied == len(model.state_dict())
    assert torch.equal(
        model.question_encoder.cls, pre.checkpoint.parameters["question_encoder.cls"]
    )


def test_finetune_with_il_warmup(tmp_path, tiny_config, qa_train, vocabulary, vocab_size, seeds):
    answers, tokens = vocabulary
    result = finetune(tiny_config, qa_train, answers, tokens, vocab_size, seeds, tmp_path, il_warmup=True)
    assert (tmp_path / "metrics-il_warmup.csv").exists()
    assert (tmp_path / "il_warmup.dstc").exists()
    assert result.checkpoint.extra["il_warmup"] is True


@pytest.mark.parametrize("mask", [StreamMask.IL_ONLY, StreamMask.VL_ONLY])
def test_finetune_single_stream(tiny_config, qa_train, vocabulary, vocab_size, seeds, mask):
    answers, tokens = vocabulary
    result = finetune(tiny_config, qa_train, answers, tokens, vocab_size, seeds, mask=mask)
    assert result.checkpoint.extra["mask"] == mask.name


def test_finetune_question_only(tiny_config, qa_train, vocabulary, vocab_size, seeds):
    answers, tokens = vocabulary
    result = finetune(tiny_config, qa_train, answers, tokens, vocab_size, seeds, kind=QuestionOnlyModel.kind)
    assert result.checkpoint.kind == "question_only"
    assert not any(k.startswith("video_encoder") for k in result.checkpoint.parameters)


def test_finetune_argument_errors(tiny_config, qa_train, vocabulary, vocab_size, seeds):
    answers, tokens = vocabulary
    with pytest.raises(ValueError, match="no samples"):
        finetune(tiny_config, [], answers, tokens, vocab_size, seeds)
    with pytest.raises(ValueError, match="differ in length"):
        finetune(tiny_config, qa_train, answers, tokens[:-1], vocab_size, seeds)
    with pytest.raises(ValueError, match="at least one stream"):
        finetune(tiny_config, qa_train, answers, tokens, vocab_size, seeds, mask=StreamMask(False, False))


@pytest.mark.slow
def test_pretraining_loss_decreases(world, seeds):
    config = make_tiny_config(training_steps=300, pretrain_samples=400, embedding_size=32, num_heads=4, ffn_size=64)
    samples = gen_trm_dataset(world, config, config.pretrain_samples, seeds, DATA_TRM_TRAIN)
    history = pretrain(config, samples, vocab_size_for(config), seeds).history
    first = sum(r["loss_total"] for r in history[:30]) / 30
    last = sum(r["loss_total"] for r in history[-30:]) / 30
    assert last < first
