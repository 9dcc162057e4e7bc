"""Evaluation harness.

Public API
----------
Permutation
    normal | identity | shuffled(seed) | reversed; reorders the raw video
    feature rows of every sample before they reach the model. Frames for the
    image-language stream are left untouched, so only the video-language
    stream's temporal order is tested. Identity is the normal permutation
    under another name, so both produce byte-identical reports.
EvalReport
    Per-question-type accuracy and counts (TRM datasets: one type per
    template), per-template breakdown, overall accuracy; CSV rows and a text table.
evaluate(predictor, samples, permutation, mask, split) -> EvalReport
shuffle_report(predictor, samples, n_seeds, mask, split, base_seed) -> ShuffleReport
stream_ablation(predictor, samples, split) -> dict[str, EvalReport]
answer_upper_bound(train, test) -> dict[str, float]
check_dataset(config, samples)
"""

from __future__ import annotations

import csv
import dataclasses
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dest_qa.config import ConfigError, TrainConfig
from dest_qa.pipeline import StreamMask
from dest_qa.predictors import Predictor, Sample, expected_answer
from dest_qa.qa import QaSample, build_answer_vocabulary
from dest_qa.trm import TrmSample
from dest_qa.utils.log import log
from dest_qa.utils.text import format_accuracy, format_fields, format_table

REPORT_COLUMNS = ("split", "question_type", "permutation", "seed", "accuracy", "n")
OVERALL = "overall"


@dataclass(frozen=True)
class Permutation:
    mode: str = "normal"
    seed: int | None = None

    MODES = ("normal", "identity", "shuffled", "reversed")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"Unknown permutation: {self.mode}. Must be one of: {', '.join(self.MODES)}")
        if self.mode == "identity":
            # identity runs take the normal path and produce the same report
            object.__setattr__(self, "mode", "normal")
            object.__setattr__(self, "seed", None)
        if self.mode == "shuffled" and self.seed is None:
            raise ValueError("shuffled permutation needs a seed")

    @classmethod
    def parse(cls, spec: str) -> Permutation:
        """"normal", "identity", "reversed" or "shuffled:<seed>"."""
        mode, _, seed = spec.partition(":")
        return cls(mode, int(seed) if seed else None)

    @property
    def label(self) -> str:
        return f"shuffled({self.seed})" if self.mode == "shuffled" else self.mode

    def order(self, rows: int, index: int) -> np.ndarray:
        if self.mode == "reversed":
            return np.arange(rows)[::-1]
        if self.mode == "shuffled":
            return np.random.default_rng([self.seed, index]).permutation(rows)
        return np.arange(rows)

    def apply(self, samples: Sequence[Sample]) -> list[Sample]:
        if self.mode == "normal":
            return list(samples)
        return [
            dataclasses.replace(s, features=s.features[self.order(s.features.shape[0], i)])
            for i, s in enumerate(samples)
        ]


def question_type(sample: Sample) -> str:
    if isinstance(sample, TrmSample):
        return sample.template.value
    return sample.question_type.value


def template_key(sample: Sample) -> str:
    if isinstance(sample, TrmSample):
        return sample.template.value
    return f"{sample.question_type.value}/{sample.template}"


@dataclass
class EvalReport:
    split: str
    permutation: Permutation
    mask: str
    predictor: str
    correct: dict[str, int] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    template_correct: dict[str, int] = field(default_factory=dict)
    template_counts: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def overall(self) -> float:
        return sum(self.correct.values()) / self.total if self.total else 0.0

    def accuracy(self, qtype: str) -> float:
        if qtype == OVERALL:
            return self.overall
        return self.correct[qtype] / self.counts[qtype] if self.counts.get(qtype) else 0.0

    @property
    def types(self) -> list[str]:
        return sorted(self.counts)

    def csv_rows(self) -> list[list[object]]:
        seed = "" if self.permutation.seed is None else self.permutation.seed
        rows = [
            [self.split, t, self.permutation.mode, seed, repr(self.accuracy(t)), self.counts[t]]
            for t in self.types
        ]
        rows.append([self.split, OVERALL, self.permutation.mode, seed, repr(self.overall), self.total])
        return rows

    def table(self) -> str:
        rows = [[t, format_accuracy(self.accuracy(t)), self.counts[t]] for t in self.types]
        rows += [
            [f"  {k}", format_accuracy(self.template_correct[k] / n), n]
            for k, n in sorted(self.template_counts.items())
            if "/" in k
        ]
        rows.append([OVERALL, format_accuracy(self.overall), self.total])
        title = (f"{self.split} | {self.predictor} | permutation {self.permutation.label} "
                 f"| streams {self.mask} (permutations reorder video features only)")  # fmt: skip
        return title + "\n" + format_table(["question type", "accuracy", "n"], rows)


def write_csv(rows: Iterable[Sequence[object]], path: Path | str, columns: Sequence[str] = REPORT_COLUMNS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def check_dataset(config: TrainConfig, samples: Sequence[Sample]) -> None:
    """Refuse datasets whose feature or patch shapes differ from the config."""
    if not samples:
        raise ValueError("empty dataset")
    width = samples[0].features.shape[1]
    if width != config.feature_size:
        raise ConfigError(f"Dataset is incompatible with run config: feature_size=({config.feature_size}, {width})")
    if isinstance(samples[0], QaSample):
        shape = tuple(samples[0].frames.shape[1:])
        if shape != (config.patch_count, config.patch_size):
            raise ConfigError(
                f"Dataset is incompatible with run config: patches=({(config.patch_count, config.patch_size)}, {shape})"
            )


def evaluate(
    predictor: Predictor,
    samples: Sequence[Sample],
    permutation: Permutation = Permutation(),
    mask: StreamMask = StreamMask.BOTH,
    split: str = "test",
) -> EvalReport:
    if not samples:
        raise ValueError("evaluate: empty dataset")
    predictions = predictor.predict(permutation.apply(samples), mask)
    report = EvalReport(split=split, permutation=permutation, mask=mask.name, predictor=predictor.name)
    correct, counts = Counter(), Counter()
    t_correct, t_counts = Counter(), Counter()
    for sample, predicted in zip(samples, predictions):
        hit = int(predicted == expected_answer(sample))
        qtype, key = question_type(sample), template_key(sample)
        correct[qtype] += hit
        counts[qtype] += 1
        t_correct[key] += hit
        t_counts[key] += 1
    report.correct, report.counts = dict(correct), dict(counts)
    report.template_correct, report.template_counts = dict(t_correct), dict(t_counts)
    for row in report.csv_rows():
        log(format_fields(REPORT_COLUMNS, row))
    return report


@dataclass
class ShuffleReport:
    normal: EvalReport
    shuffled: list[EvalReport]

    @property
    def types(self) -> list[str]:
        return self.normal.types + [OVERALL]

    def shuffled_mean(self, qtype: str) -> float:
        return float(np.mean([r.accuracy(qtype) for r in self.shuffled]))

    def shuffled_stdev(self, qtype: str) -> float:
        values = [r.accuracy(qtype) for r in self.shuffled]
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    def drop(self, qtype: str) -> float:
        """normal - mean shuffled accuracy, sign preserved."""
        return self.normal.accuracy(qtype) - self.shuffled_mean(qtype)

    def csv_rows(self) -> list[list[object]]:
        rows = self.normal.csv_rows()
        for r in self.shuffled:
            rows += r.csv_rows()
        return rows

    def summary_rows(self) -> list[list[object]]:
        return [
            [
                t,
                repr(self.normal.accuracy(t)),
                repr(self.shuffled_mean(t)),
                repr(self.shuffled_stdev(t)),
                repr(self.drop(t)),
            ]
            for t in self.types
        ]

    def table(self) -> str:
        rows = [
            [
                t,
                format_accuracy(self.normal.accuracy(t)),
                f"{format_accuracy(self.shuffled_mean(t))} ± {100 * self.shuffled_stdev(t):.2f}",
                f"{100 * self.drop(t):+.2f}",
            ]
            for t in self.types
        ]
        title = (f"shuffle sensitivity over {len(self.shuffled)} seed(s), "
                 "video feature order only")  # fmt: skip
        return title + "\n" + format_table(["question type", "normal", "shuffled", "drop"], rows)


SUMMARY_COLUMNS = ("question_type", "normal", "shuffled_mean", "shuffled_stdev", "drop")


def shuffle_report(
    predictor: Predictor,
    samples: Sequence[Sample],
    n_seeds: int = 3,
    mask: StreamMask = StreamMask.BOTH,
    split: str = "test",
    base_seed: int = 0,
) -> ShuffleReport:
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    normal = evaluate(predictor, samples, Permutation(), mask, split)
    shuffled = [
        evaluate(predictor, samples, Permutation("shuffled", base_seed + i), mask, split)
        for i in range(n_seeds)
    ]
    return ShuffleReport(normal=normal, shuffled=shuffled)


def stream_ablation(
    predictor: Predictor, samples: Sequence[Sample], split: str = "test"
) -> dict[str, EvalReport]:
    return {
        mask.name: evaluate(predictor, samples, Permutation(), mask, split)
        for mask in (StreamMask.BOTH, StreamMask.IL_ONLY, StreamMask.VL_ONLY)
    }


def answer_upper_bound(train: Sequence[QaSample], test: Sequence[QaSample]) -> dict[str, float]:
    """Per question type, the fraction of test answers in the training answer vocabulary."""
    seen = set(build_answer_vocabulary(train))
    hits: dict[str, int] = defaultdict(int)
    counts: dict[str, int] = defaultdict(int)
    for s in test:
        qtype = question_type(s)
        hits[qtype] += s.answer in seen
        counts[qtype] += 1
    bound = {t: hits[t] / counts[t] for t in sorted(counts)}
    if counts:
        bound[OVERALL] = sum(hits.values()) / sum(counts.values())
    return bound
