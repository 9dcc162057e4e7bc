"""Pre-training and fine-tuning loops.

Public API
----------
build_optimizer(model, config) -> AdamW
    One decay and one no-decay group per learning-rate group
    (base / video / mlp / ans), each with its own peak rate.
trm_forward(model, batch) -> TrmForward
qa_forward(model, batch, answer_tokens, mask) -> logits
pretrain(config, samples, seeds, out_dir, ...) -> TrainResult
    TRM loss + video/caption alignment on the video-language stream.
finetune(config, samples, answer_vocabulary, answer_tokens, seeds, out_dir, ...) -> TrainResult
    Answer-vocabulary cross-entropy; fresh or TRM-initialized; stream masks;
    question-only baseline; optional image-language warm-up on spatial questions.

Every step is a pure function of (seed, step): the data order comes from the
epoch's seeded permutation and dropout from a per-step generator, so a run
resumed from a checkpoint continues with the same losses.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from dest_qa.batching import (
    QaBatch,
    TrmBatch,
    batch_order,
    collate_qa,
    collate_trm,
    steps_per_epoch,
)
from dest_qa.checkpoint import Checkpoint, from_model, save_checkpoint
from dest_qa.config import TrainConfig, check_compatible
from dest_qa.numeric import (
    DATA_FRAMES,
    AdamW,
    NumericError,
    Schedule,
    Seeds,
    check_finite,
    lr_at_step,
)
from dest_qa.objectives import combine_losses, qa_loss, trm_loss
from dest_qa.pipeline import AnswerBank, AnswerSelector, DestModel, Mode, StreamMask, build_model
from dest_qa.qa import QaSample, spatial_only
from dest_qa.trm import TrmSample
from dest_qa.utils.log import log

PRETRAIN_COLUMNS = ("step", "loss_trm", "loss_align", "loss_total", "lr", "trm_acc")
FINETUNE_COLUMNS = ("step", "loss_qa", "lr", "qa_acc", "skipped")


def group_peak_lr(config: TrainConfig, group: str) -> float:
    return {
        "base": config.lr_base,
        "video": config.lr_video,
        "mlp": config.lr_mlp,
        "ans": config.lr_ans,
    }[group]


def build_optimizer(model: AnswerSelector, config: TrainConfig) -> AdamW:
    """Matrices decay; gains, biases, special rows and scalars do not."""
    groups = []
    for name, named in model.parameter_groups().items():
        peak = group_peak_lr(config, name)
        decay = [p for n, p in named if p.dim() >= 2 and "embedding" not in n]
        no_decay = [p for n, p in named if not (p.dim() >= 2 and "embedding" not in n)]
        if decay:
            groups.append({"params": decay, "name": name, "peak_lr": peak, "weight_decay": config.weight_decay})
        if no_decay:
            groups.append({"params": no_decay, "name": f"{name}.no_decay", "peak_lr": peak, "weight_decay": 0.0})
    return AdamW(
        groups,
        lr=0.0,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict[str, float]] = field(default_factory=list)  # one row per step
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None


class MetricsLog:
    """CSV with one row per log interval, values averaged over the interval.

    On resume, rows logged after `resume_step` are dropped so the rerun steps
    are not written twice.
    """

    def __init__(self, path: Path | None, columns: Sequence[str], resume_step: int | None = None):
        self.path = path
        self.columns = tuple(columns)
        self.pending: list[dict[str, float]] = []
        if path is None:
            return
        kept = []
        if resume_step is not None and path.exists():
            with path.open(newline="", encoding="utf-8") as f:
                kept = [row for row in list(csv.reader(f))[1:] if int(row[0]) <= resume_step]
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.columns)
            writer.writerows(kept)

    def add(self, row: dict[str, float]) -> None:
        self.pending.append(row)

    def flush(self, step: int) -> dict[str, float]:
        if not self.pending:
            return {}
        averaged = {"step": step}
        for column in self.columns[1:]:
            averaged[column] = sum(r[column] for r in self.pending) / len(self.pending)
        self.pending = []
        if self.path is not None:
            with self.path.open("a", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow([averaged["step"]] + [repr(float(averaged[c])) for c in self.columns[1:]])
        return averaged


class TrainLoop:
    """Shared step mechanics: schedule, dropout seeding, clipping, checkpoints."""

    def __init__(
        self,
        model: AnswerSelector,
        config: TrainConfig,
        seeds: Seeds,
        total_steps: int,
        stage: str,
        columns: Sequence[str],
        out_dir: Path | None,
        checkpoint_meta: dict | None = None,
        resume: Checkpoint | None = None,
    ):
        self.model = model
        self.config = config
        self.seeds = seeds
        self.total_steps = total_steps
        self.stage = stage
        self.out_dir = out_dir
        self.meta = checkpoint_meta or {}
        self.optimizer = build_optimizer(model, config)
        self.names = {p: n for n, p in model.named_parameters()}
        self.start_step = 0
        if resume is not None:
            model.load_state_dict(resume.parameters)
            self.optimizer.import_state(self.names, resume.optimizer)
            self.start_step = resume.step
        metrics_path = out_dir / f"metrics-{stage}.csv" if out_dir is not None else None
        self.metrics = MetricsLog(metrics_path, columns, resume_step=self.start_step if resume is not None else None)

    def lr_for(self, group: dict, step: int) -> float:
        schedule = Schedule(group["peak_lr"], self.config.warmup, self.total_steps)
        return lr_at_step(schedule, step)

    def snapshot(self, step: int) -> Checkpoint:
        return from_model(self.model, step, self.stage, self.optimizer, **self.meta)

    def save(self, step: int, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        return save_checkpoint(self.snapshot(step), self.out_dir / name)

    def run(self, step_fn: Callable[[int], tuple[torch.Tensor, dict[str, float]]]) -> TrainResult:
        history = []
        params = [p for p in self.model.parameters()]
        for step in range(self.start_step, self.total_steps):
            for group in self.optimizer.param_groups:
                group["lr"] = self.lr_for(group, step)
            self.model.train()
            self.model.set_dropout_generator(self.seeds.dropout_generator(step))
            self.optimizer.zero_grad(set_to_none=True)
            try:
                loss, row = step_fn(step)
                check_finite(loss.detach(), f"{self.stage} loss at step {step}")
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip)
                self.optimizer.step()
            except NumericError:
                path = self.save(step, f"{self.stage}-last_good.dstc")
                _log(f"step {step}: non-finite value, last good state saved to {path}")
                raise

            row = {"step": step, "lr": self.optimizer.param_groups[0]["lr"], **row}
            history.append(row)
            self.metrics.add(row)
            done = step + 1
            if done % self.config.log_interval == 0 or done == self.total_steps:
                averaged = self.metrics.flush(done)
                _log(f"{self.stage} {done}/{self.total_steps} "
                    + " ".join(f"{k}={v:.4f}" for k, v in averaged.items() if k != "step"))  # fmt: skip
            if done % self.config.checkpoint_interval == 0 and done < self.total_steps:
                self.save(done, f"{self.stage}-latest.dstc")

        self.model.set_dropout_generator(None)
        self.model.eval()
        final = self.snapshot(self.total_steps)
        path = save_checkpoint(final, self.out_dir / f"{self.stage}.dstc") if self.out_dir else None
        return TrainResult(
            checkpoint=final,
            history=history,
            metrics_path=self.metrics.path,
            checkpoint_path=path,
        )


# --- pre-training ------------------------------------------------------------


@dataclass
class TrmForward:
    logits: torch.Tensor  # [B, C_max]
    candidate_mask: torch.Tensor  # [B, C_max]
    clip_video: torch.Tensor  # [P, D] mean of each clip's contextualized rows
    clip_caption: torch.Tensor  # [P, D] question-encoder CLS of each clip caption


def clip_means(contextualized: torch.Tensor, boundaries: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean of every clip's rows; row 0 of each item is BOS, so clip rows shift by one."""
    means = []
    for b, bounds in enumerate(boundaries):
        for start, end in zip(bounds, bounds[1:]):
            means.append(contextualized[b, start + 1 : end + 1].mean(dim=0))
    return torch.stack(means)


def trm_forward(model: DestModel, batch: TrmBatch) -> TrmForward:
    """Video-language stream only; the image-language stream gets no input in pre-training."""
    question = model.encode_text(batch.questions)
    video = model.contextualize_video(batch.videos)
    s = model.vl_representation(question, video)
    bank: AnswerBank = model.encode_candidate_sets(batch.candidates)
    logits = model.answer_logits(torch.zeros_like(s), s, bank, StreamMask.VL_ONLY)
    return TrmForward(
        logits=logits,
        candidate_mask=bank.mask,
        clip_video=clip_means(video.contextualized, batch.boundaries),
        clip_caption=model.encode_text(batch.clip_captions).cls,
    )


def trm_losses(model: DestModel, batch: TrmBatch) -> tuple[torch.Tensor, dict[str, float]]:
    out = trm_forward(model, batch)
    l_trm = trm_loss(out.logits, batch.labels, out.candidate_mask)
    l_align = model.align(out.clip_video, out.clip_caption)
    total = combine_losses(l_trm, l_align, model.loss_weights)
    accuracy = (out.logits.argmax(dim=-1) == batch.labels).float().mean().item()
    return total, {
        "loss_trm": l_trm.item(),
        "loss_align": l_align.item(),
        "loss_total": total.item(),
        "trm_acc": accuracy,
    }


def pretrain(
    config: TrainConfig,
    samples: Sequence[TrmSample],
    vocab_size: int,
    seeds: Seeds,
    out_dir: Path | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Optimize TRM + alignment for config.training_steps steps."""
    if not samples:
        raise ValueError("pretrain: no samples")
    if resume is not None:
        check_compatible(config, resume.config.to_dict())
    model = build_model(config, vocab_size, DestModel.kind, seeds.init_generator())
    loop = TrainLoop(
        model, config, seeds, config.training_steps, "pretrain", PRETRAIN_COLUMNS, out_dir,
        resume=resume,
    )  # fmt: skip
    _log(f"pretrain: {len(samples)} samples, {config.training_steps} steps, "
        f"loss weighting {config.loss_weighting}")  # fmt: skip

    def step_fn(step: int):
        indices = batch_order(len(samples), config.batch_size, step, seeds)
        return trm_losses(model, collate_trm([samples[i] for i in indices]))

    return loop.run(step_fn)


# --- fine-tuning -------------------------------------------------------------


def qa_forward(
    model: AnswerSelector,
    batch: QaBatch,
    answer_tokens: Sequence[Sequence[int]] | AnswerBank,
    mask: StreamMask = StreamMask.BOTH,
) -> torch.Tensor:
    return model(
        batch.questions,
        answer_tokens,
        frames=batch.frames,
        videos=batch.videos,
        mask=mask,
        frame_mask=batch.frame_mask,
    ).logits


def initialize_from(model: AnswerSelector, checkpoint: Checkpoint, config: TrainConfig) -> int:
    """Copy every parameter the checkpoint shares with the model; returns the count."""
    check_compatible(config, checkpoint.config.to_dict())
    own = model.state_dict()
    shared = {k: v for k, v in checkpoint.parameters.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(shared, strict=False)
    _log(f"initialized {len(shared)}/{len(own)} tensors from {checkpoint.stage} checkpoint")
    return len(shared)


def finetune(
    config: TrainConfig,
    samples: Sequence[QaSample],
    answer_vocabulary: Sequence[int],
    answer_tokens: Sequence[Sequence[int]],
    vocab_size: int,
    seeds: Seeds,
    out_dir: Path | None = None,
    kind: str = DestModel.kind,
    mask: StreamMask = StreamMask.BOTH,
    pretrained: Checkpoint | None = None,
    il_warmup: bool = False,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Optimize answer-vocabulary cross-entropy for config.training_epochs epochs."""
    if not samples:
        raise ValueError("finetune: no samples")
    if len(answer_vocabulary) != len(answer_tokens):
        raise ValueError("finetune: answer_vocabulary and answer_tokens differ in length")
    if kind == DestModel.kind and not (mask.use_il or mask.use_vl):
        raise ValueError("finetune: at least one stream must be enabled")

    model = build_model(config, vocab_size, kind, seeds.init_generator())
    meta = {
        "answer_vocabulary": list(answer_vocabulary),
        "answer_tokens": [list(t) for t in answer_tokens],
        "extra": {
            "init": "trm" if pretrained is not None else "fresh",
            "mask": mask.name,
            "il_warmup": il_warmup,
        },
    }
    if pretrained is not None and resume is None:
        initialize_from(model, pretrained, config)
    if resume is not None:
        check_compatible(config, resume.config.to_dict())

    if il_warmup and kind == DestModel.kind and resume is None:
        spatial = spatial_only(samples)
        if spatial:
            _qa_stage(model, config, spatial, answer_vocabulary, answer_tokens, seeds,
                      out_dir, "il_warmup", StreamMask.IL_ONLY, meta)  # fmt: skip

    return _qa_stage(model, config, samples, answer_vocabulary, answer_tokens, seeds,
                     out_dir, "finetune", mask, meta, resume)  # fmt: skip


def _qa_stage(
    model: AnswerSelector,
    config: TrainConfig,
    samples: Sequence[QaSample],
    answer_vocabulary: Sequence[int],
    answer_tokens: Sequence[Sequence[int]],
    seeds: Seeds,
    out_dir: Path | None,
    stage: str,
    mask: StreamMask,
    meta: dict,
    resume: Checkpoint | None = None,
) -> TrainResult:
    total = config.training_epochs * steps_per_epoch(len(samples), config.batch_size)
    loop = TrainLoop(model, config, seeds, total, stage, FINETUNE_COLUMNS, out_dir, meta, resume)
    _log(f"{stage}: {len(samples)} samples, {total} steps, mask {mask.name}, model {model.kind}")

    def step_fn(step: int):
        indices = batch_order(len(samples), config.batch_size, step, seeds)
        batch = collate_qa(
            [samples[i] for i in indices],
            config.num_frames_t,
            Mode.TRAIN,
            seeds.data_rng(DATA_FRAMES, step),
        )
        logits = qa_forward(model, batch, answer_tokens, mask)
        skipped: Counter = Counter()
        loss = qa_loss(logits, batch.answers, answer_vocabulary, skipped)
        predicted = [answer_vocabulary[i] for i in logits.argmax(dim=-1).tolist()]
        accuracy = sum(p == a for p, a in zip(predicted, batch.answers)) / len(batch)
        return loss, {
            "loss_qa": loss.item(),
            "qa_acc": accuracy,
            "skipped": float(skipped["out_of_vocabulary"]),
        }

    return loop.run(step_fn)


def _log(message: str) -> None:
    log(message, "trainer")
