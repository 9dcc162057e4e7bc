"""End-to-end runs: world -> data -> pre-training -> fine-tuning -> evaluation,
and sweeps over the number of frames (T) or pre-training clips (K)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from dest_qa.config import TrainConfig
from dest_qa.evaluation import (
    EvalReport,
    ShuffleReport,
    answer_upper_bound,
    evaluate,
    shuffle_report,
    write_csv,
)
from dest_qa.numeric import (
    DATA_QA_EVAL,
    DATA_QA_TRAIN,
    DATA_TRM_EVAL,
    DATA_TRM_TRAIN,
    DATA_WORLD,
    GradCheckReport,
    Seeds,
    grad_check,
)
from dest_qa.objectives import combine_losses, trm_loss
from dest_qa.pipeline import DestModel, StreamMask, build_model
from dest_qa.predictors import CheckpointPredictor
from dest_qa.qa import QaSample, build_answer_vocabulary, gen_downstream_dataset
from dest_qa.trainer import TrainResult, clip_means, finetune, pretrain
from dest_qa.trm import gen_trm_dataset
from dest_qa.utils.log import log
from dest_qa.world import EventVocab, build_event_vocab, vocab_size_for

SWEEP_AXES = {
    "T": ("num_frames_t", "num_frames_t_eval"),
    "K": ("num_videos_k",),
}
SWEEP_COLUMNS = ("axis", "value", "split", "question_type", "permutation", "seed", "accuracy", "n")


@dataclass
class DownstreamData:
    train: list[QaSample]
    test: list[QaSample]
    vocabulary: list[int]
    answer_tokens: list[list[int]]


def build_world(config: TrainConfig, seeds: Seeds) -> EventVocab:
    return build_event_vocab(config, seeds.data_rng(DATA_WORLD))


def build_downstream(vocab: EventVocab, config: TrainConfig, seeds: Seeds) -> DownstreamData:
    train = gen_downstream_dataset(vocab, config, config.finetune_samples, seeds, DATA_QA_TRAIN)
    test = gen_downstream_dataset(vocab, config, config.eval_samples, seeds, DATA_QA_EVAL)
    vocabulary = build_answer_vocabulary(train)
    return DownstreamData(
        train=train,
        test=test,
        vocabulary=vocabulary,
        answer_tokens=[vocab.answer_tokens(a) for a in vocabulary],
    )


@dataclass
class ExperimentResult:
    pretrain: TrainResult | None
    finetune: TrainResult
    trm_report: EvalReport | None
    qa_report: EvalReport
    shuffle: ShuffleReport | None
    upper_bound: dict[str, float] = field(default_factory=dict)


def run_experiment(
    config: TrainConfig,
    out_dir: Path | None = None,
    with_trm: bool = True,
    kind: str = DestModel.kind,
    mask: StreamMask = StreamMask.BOTH,
    il_warmup: bool = False,
    shuffle_seeds: int = 3,
) -> ExperimentResult:
    """Train (optionally TRM-pretrained) and evaluate one configuration."""
    seeds = Seeds.from_seed(config.seed)
    vocab = build_world(config, seeds)
    vocab_size = len(vocab.tokens)

    pre, trm_report = None, None
    if with_trm and kind == DestModel.kind:
        trm_train = gen_trm_dataset(vocab, config, config.pretrain_samples, seeds, DATA_TRM_TRAIN)
        trm_eval = gen_trm_dataset(vocab, config, config.pretrain_eval_samples, seeds, DATA_TRM_EVAL)
        pre = pretrain(config, trm_train, vocab_size, seeds, out_dir)
        trm_report = evaluate(CheckpointPredictor(pre.checkpoint), trm_eval, split="trm_eval")

    data = build_downstream(vocab, config, seeds)
    tuned = finetune(
        config, data.train, data.vocabulary, data.answer_tokens, vocab_size, seeds, out_dir,
        kind=kind, mask=mask, pretrained=pre.checkpoint if pre else None, il_warmup=il_warmup,
    )  # fmt: skip
    predictor = CheckpointPredictor(tuned.checkpoint)
    qa_report = evaluate(predictor, data.test, mask=mask)
    shuffled = shuffle_report(predictor, data.test, shuffle_seeds, mask) if shuffle_seeds else None

    return ExperimentResult(
        pretrain=pre,
        finetune=tuned,
        trm_report=trm_report,
        qa_report=qa_report,
        shuffle=shuffled,
        upper_bound=answer_upper_bound(data.train, data.test),
    )


def sweep(
    axis: str,
    values: Sequence[int],
    base: TrainConfig,
    out_dir: Path | None = None,
    with_trm: bool = True,
) -> list[list[object]]:
    """Retrain and evaluate once per value with the base seed; returns SWEEP_COLUMNS rows.

    T changes the frames seen in training and evaluation; K changes the clips
    per pre-training sequence (and the downstream videos built the same way).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"Unknown sweep axis: {axis}. Must be one of: {', '.join(SWEEP_AXES)}")
    if not values:
        raise ValueError("sweep: no values")

    rows: list[list[object]] = []
    for value in values:
        config = base.replace(**{key: value for key in SWEEP_AXES[axis]})
        log(f"sweep {axis}={value}")
        run_dir = out_dir / f"{axis}={value}" if out_dir is not None else None
        result = run_experiment(config, run_dir, with_trm=with_trm, shuffle_seeds=0)
        reports = [r for r in (result.trm_report, result.qa_report) if r is not None]
        for report in reports:
            rows += [[axis, value, *row] for row in report.csv_rows()]

    if out_dir is not None:
        write_csv(rows, out_dir / f"sweep-{axis}.csv", SWEEP_COLUMNS)
    return rows


def gradcheck_config(seed: int = 0) -> TrainConfig:
    """Smallest model that still exercises every parameter group."""
    return TrainConfig(
        embedding_size=8,
        num_layers=1,
        num_heads=2,
        ffn_size=16,
        dropout=0.0,
        feature_size=4,
        patch_count=2,
        patch_size=4,
        max_video_length=8,
        max_question_length=8,
        num_videos_k=2,
        num_frames_t=2,
        num_frames_t_eval=2,
        event_count=4,
        attribute_count=2,
        projection_size=4,
        loss_weighting="uncertainty",
        seed=seed,
    )


def gradcheck_dest(seed: int = 0, tol: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of the two-stream forward plus TRM and alignment
    losses (D=8, 1 layer, 2 heads, N=2, H=4, M=3, T=2, 3 candidates), in float64."""
    config = gradcheck_config(seed)
    seeds = Seeds.from_seed(seed)
    vocab_size = vocab_size_for(config)
    model = build_model(config, vocab_size, DestModel.kind, seeds.init_generator()).double()
    model.eval()

    rng = seeds.data_rng(DATA_WORLD)
    video = torch.from_numpy(rng.standard_normal((3, config.feature_size)))
    frames = torch.from_numpy(rng.standard_normal((1, 2, config.patch_count, config.patch_size)))
    question = [[1, 2, 8, 3, 16]]
    candidates = [[17, 21], [18, 22], [19, 21]]
    captions = [[17, 21], [18, 22]]
    boundaries = [[0, 1, 3]]

    def computation() -> torch.Tensor:
        text = model.encode_text(question)
        encoded = model.contextualize_video([video])
        r = model.il_representation(text, frames)
        s = model.vl_representation(text, encoded)
        logits = model.answer_logits(r, s, model.encode_answers(candidates))
        l_trm = trm_loss(logits, [1])
        l_align = model.align(clip_means(encoded.contextualized, boundaries), model.encode_text(captions).cls)
        return combine_losses(l_trm, l_align, model.loss_weights)

    return grad_check(computation, dict(model.named_parameters()), tol=tol)
