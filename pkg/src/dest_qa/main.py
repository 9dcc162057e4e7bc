import argparse
import json
import sys
from pathlib import Path

from dest_qa.checkpoint import load_checkpoint
from dest_qa.config import ConfigError, TrainConfig, env_threads
from dest_qa.dataset_io import FormatError, read_dataset, write_dataset
from dest_qa.evaluation import (
    SUMMARY_COLUMNS,
    Permutation,
    answer_upper_bound,
    check_dataset,
    evaluate,
    shuffle_report,
    stream_ablation,
    write_csv,
)
from dest_qa.experiments import build_world, gradcheck_dest, sweep
from dest_qa.numeric import (
    DATA_QA_EVAL,
    DATA_QA_TRAIN,
    DATA_TRM_EVAL,
    DATA_TRM_TRAIN,
    NumericError,
    Seeds,
    set_deterministic,
)
from dest_qa.pipeline import DestModel, QuestionOnlyModel, StreamMask
from dest_qa.predictors import create_predictor
from dest_qa.qa import QaSample, build_answer_vocabulary, gen_downstream_dataset
from dest_qa.trainer import finetune, pretrain
from dest_qa.trm import TrmSample, gen_trm_dataset
from dest_qa.utils.log import log, set_verbose

EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


def load_config(args: argparse.Namespace) -> TrainConfig:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def load_samples(args: argparse.Namespace, config: TrainConfig, seeds: Seeds, kind: str, purpose: int):
    """Samples from --data, or generated from the run seed."""
    if args.data:
        samples = read_dataset(args.data)
        check_dataset(config, samples)
        return samples
    vocab = build_world(config, seeds)
    if kind == "trm":
        size = config.pretrain_samples if purpose == DATA_TRM_TRAIN else config.pretrain_eval_samples
        return gen_trm_dataset(vocab, config, size, seeds, purpose)
    size = config.finetune_samples if purpose == DATA_QA_TRAIN else config.eval_samples
    return gen_downstream_dataset(vocab, config, size, seeds, purpose)


def predictor_spec(args: argparse.Namespace) -> str:
    if args.predictor:
        return args.predictor
    if args.checkpoint:
        return f"checkpoint:{args.checkpoint}"
    raise ConfigError("give --checkpoint <path> or --predictor <spec>")


def eval_samples(args: argparse.Namespace, config: TrainConfig, seeds: Seeds):
    kind = args.split
    return load_samples(args, config, seeds, kind, DATA_TRM_EVAL if kind == "trm" else DATA_QA_EVAL)


def cmd_gen_world(args, config, seeds):
    vocab = build_world(config, seeds)
    path = args.out / "world.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(vocab.to_dict(), sort_keys=True), encoding="utf-8")
    for event in range(vocab.event_count):
        print(f"event {event:3d}: {vocab.describe(event)}")
    print(f"\n{vocab.event_count} events, {vocab.attribute_count} attributes, "
          f"{len(vocab.tokens)} tokens -> {path}")  # fmt: skip


def cmd_gen_trm(args, config, seeds):
    vocab = build_world(config, seeds)
    for split, purpose, size in (
        ("trm-train", DATA_TRM_TRAIN, config.pretrain_samples),
        ("trm-eval", DATA_TRM_EVAL, config.pretrain_eval_samples),
    ):
        write_dataset(gen_trm_dataset(vocab, config, size, seeds, purpose), args.out / split)
        print(f"{split}: {size} samples -> {args.out / split}")


def cmd_gen_qa(args, config, seeds):
    vocab = build_world(config, seeds)
    for split, purpose, size in (
        ("qa-train", DATA_QA_TRAIN, config.finetune_samples),
        ("qa-eval", DATA_QA_EVAL, config.eval_samples),
    ):
        write_dataset(gen_downstream_dataset(vocab, config, size, seeds, purpose), args.out / split)
        print(f"{split}: {size} samples -> {args.out / split}")


def cmd_pretrain(args, config, seeds):
    samples = load_samples(args, config, seeds, "trm", DATA_TRM_TRAIN)
    if not isinstance(samples[0], TrmSample):
        raise ConfigError(f"{args.data} is not a TRM dataset")
    resume = load_checkpoint(args.resume) if args.resume else None
    vocab_size = len(build_world(config, seeds).tokens)
    result = pretrain(config, samples, vocab_size, seeds, args.out, resume)
    print(f"pretrained {config.training_steps} steps -> {result.checkpoint_path}")
    print(f"metrics -> {result.metrics_path}")


def cmd_finetune(args, config, seeds):
    samples = load_samples(args, config, seeds, "qa", DATA_QA_TRAIN)
    if not isinstance(samples[0], QaSample):
        raise ConfigError(f"{args.data} is not a QA dataset")
    vocab = build_world(config, seeds)
    vocabulary = build_answer_vocabulary(samples)
    result = finetune(
        config,
        samples,
        vocabulary,
        [vocab.answer_tokens(a) for a in vocabulary],
        len(vocab.tokens),
        seeds,
        args.out,
        kind=args.kind,
        mask=StreamMask.from_name(args.mask),
        pretrained=load_checkpoint(args.init) if args.init else None,
        il_warmup=args.il_warmup,
        resume=load_checkpoint(args.resume) if args.resume else None,
    )
    print(f"fine-tuned {args.kind} ({args.mask}) -> {result.checkpoint_path}")
    print(f"metrics -> {result.metrics_path}")


def cmd_eval(args, config, seeds):
    samples = eval_samples(args, config, seeds)
    predictor = create_predictor(predictor_spec(args), config)
    report = evaluate(
        predictor, samples, Permutation.parse(args.permutation), StreamMask.from_name(args.mask), args.split
    )
    print(report.table())
    print(f"\nreport -> {write_csv(report.csv_rows(), args.out / 'report.csv')}")
    if args.split == "qa" and not args.data:
        train = load_samples(args, config, seeds, "qa", DATA_QA_TRAIN)
        bound = answer_upper_bound(train, samples)
        print("upper bound: " + ", ".join(f"{k}={v:.4f}" for k, v in bound.items()))


def cmd_shuffle_report(args, config, seeds):
    samples = eval_samples(args, config, seeds)
    predictor = create_predictor(predictor_spec(args), config)
    report = shuffle_report(
        predictor, samples, args.seeds, StreamMask.from_name(args.mask), args.split, config.seed
    )
    print(report.table())
    write_csv(report.csv_rows(), args.out / "shuffle-report.csv")
    print(f"\nsummary -> {write_csv(report.summary_rows(), args.out / 'shuffle-summary.csv', SUMMARY_COLUMNS)}")


def cmd_ablate(args, config, seeds):
    samples = eval_samples(args, config, seeds)
    predictor = create_predictor(predictor_spec(args), config)
    reports = stream_ablation(predictor, samples, args.split)
    rows = []
    for report in reports.values():
        print(report.table() + "\n")
        rows += [row + [report.mask] for row in report.csv_rows()]
    columns = ("split", "question_type", "permutation", "seed", "accuracy", "n", "streams")
    print(f"report -> {write_csv(rows, args.out / 'ablation.csv', columns)}")


def cmd_sweep(args, config, seeds):
    values = [int(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(args.axis, values, config, args.out, with_trm=not args.no_trm)
    for row in rows:
        print(", ".join(str(v) for v in row))
    print(f"\nsweep -> {args.out / f'sweep-{args.axis}.csv'}")


def cmd_gradcheck(args, config, seeds):
    report = gradcheck_dest(config.seed, args.tol)
    print(report.summary())
    if not report.passed:
        raise NumericError(f"gradient check failed: max relative error {report.max_rel_error:.3e}")


COMMANDS = {
    "gen-world": cmd_gen_world,
    "gen-trm": cmd_gen_trm,
    "gen-qa": cmd_gen_qa,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "shuffle-report": cmd_shuffle_report,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Two-stream video QA with temporal referring pre-training")
    parser.add_argument("--config", type=Path, help="JSON config file (unknown keys are rejected)")
    parser.add_argument("--seed", type=int, help="Run seed (overrides config and DEST_SEED)")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="Output directory (default: runs)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-world", help="Generate the event world and write world.json")
    sub.add_parser("gen-trm", help="Generate TRM train/eval datasets")
    sub.add_parser("gen-qa", help="Generate downstream QA train/eval datasets")

    p = sub.add_parser("pretrain", help="TRM + alignment pre-training")
    p.add_argument("--data", type=Path, help="TRM dataset directory (default: generate)")
    p.add_argument("--resume", type=Path, help="Checkpoint to resume from")

    p = sub.add_parser("finetune", help="Downstream QA fine-tuning")
    p.add_argument("--data", type=Path, help="QA dataset directory (default: generate)")
    p.add_argument("--init", type=Path, help="TRM checkpoint to initialize from")
    p.add_argument("--kind", choices=[DestModel.kind, QuestionOnlyModel.kind], default=DestModel.kind)
    p.add_argument("--mask", choices=["both", "il", "vl"], default="both", help="Streams to train")
    p.add_argument("--il-warmup", action="store_true", help="Frame-QA stage on spatial questions first")
    p.add_argument("--resume", type=Path, help="Checkpoint to resume from")

    for name, text in (
        ("eval", "Evaluate a predictor"),
        ("shuffle-report", "Accuracy drop under shuffled video features"),
        ("ablate", "Evaluate with both / image-language / video-language streams"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", type=Path, help="Checkpoint to evaluate")
        p.add_argument("--predictor", help="Predictor spec: checkpoint:<path>, oracle, random[:seed]")
        p.add_argument("--data", type=Path, help="Dataset directory (default: generate eval split)")
        p.add_argument("--split", choices=["trm", "qa"], default="qa", help="Generated split kind")
        if name != "ablate":
            p.add_argument("--mask", choices=["both", "il", "vl"], default="both")
        if name == "eval":
            p.add_argument("--permutation", default="normal", help="normal, identity, reversed, shuffled:<seed>")
        if name == "shuffle-report":
            p.add_argument("--seeds", type=int, default=3, help="Shuffle seeds to average (default: 3)")

    p = sub.add_parser("sweep", help="Retrain and evaluate over T or K")
    p.add_argument("--axis", choices=["T", "K"], required=True)
    p.add_argument("--values", required=True, help="Comma-separated values, e.g. 1,2,4,8")
    p.add_argument("--no-trm", action="store_true", help="Skip TRM pre-training")

    p = sub.add_parser("gradcheck", help="Finite-difference check of the full model")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_verbose(True)

    try:
        config = load_config(args)
        set_deterministic(env_threads())
        seeds = Seeds.from_seed(config.seed)
        log(f"{args.command}: seed {config.seed}, out {args.out}")
        COMMANDS[args.command](args, config, seeds)
    except ConfigError as e:
        print(f"🛑 Error: {e}")
        return EXIT_CONFIG
    except FormatError as e:
        print(f"🛑 Error: {e}")
        return EXIT_FORMAT
    except NumericError as e:
        print(f"🛑 Error: {e}")
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"Error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
