"""Run configuration.

Public API
----------
TrainConfig
    Frozen, flat dataclass holding every architecture, optimization and
    synthetic-world hyperparameter. Key names follow the hyperparameter
    tables of the model (embedding_size, num_heads, lr_base, lr_video, ...).

    Constructors:
        TrainConfig(**overrides)           desk-scale defaults
        TrainConfig.from_json(path)        unknown keys rejected
        TrainConfig.from_dict(data)
        TrainConfig.full_scale()           full-scale values, for reference runs

    Methods:
        replace(**changes) -> TrainConfig
        to_dict() -> dict                  the config echo stored in checkpoints
        to_json() -> str
        diff(other, keys=None) -> dict[str, tuple]

Environment (read through python-dotenv, so a local .env works too):
    DEST_SEED          default seed when neither --seed nor a config file sets one
    DEST_VERBOSE       "1"/"true" turns verbose logging on
    DEST_NUM_THREADS   torch intra-op threads (default 1, keeps runs bit-reproducible)

ConfigError
    Raised for invalid or incompatible configuration.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

load_dotenv()

LOSS_WEIGHTINGS = ("unweighted", "uncertainty")

# keys that shape the data or the parameter tensors; a checkpoint can only be
# evaluated on data generated with the same values
DATA_KEYS = (
    "embedding_size",
    "num_layers",
    "num_heads",
    "ffn_size",
    "feature_size",
    "patch_count",
    "patch_size",
    "max_video_length",
    "max_question_length",
    "event_count",
    "attribute_count",
)


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters of a run. Defaults are desk-scale."""

    # model
    embedding_size: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_size: int = 128
    dropout: float = 0.1
    max_video_length: int = 100
    max_question_length: int = 50
    feature_size: int = 16  # H, width of raw video features
    patch_count: int = 4  # N, patches per frame
    patch_size: int = 16  # width of a raw patch vector

    # inputs
    num_videos_k: int = 4
    num_frames_t: int = 4
    num_frames_t_eval: int = 4

    # optimization
    lr_base: float = 5e-4
    lr_video: float = 1e-3
    lr_mlp: float = 1e-3
    lr_ans: float = 5e-4
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup: float = 0.1
    batch_size: int = 32
    training_steps: int = 3000  # pre-training length
    training_epochs: int = 10  # fine-tuning length
    grad_clip: float = 1.0

    # objectives
    init_temperature: float = 0.07
    projection_size: int | None = None  # defaults to embedding_size // 2
    loss_weighting: str = "unweighted"

    # synthetic world
    event_count: int = 16
    attribute_count: int = 8
    duration_min: int = 2
    duration_max: int = 6
    noise_scale: float = 0.1
    min_signature_distance: float = 1.0

    # data sizes
    pretrain_samples: int = 5000
    pretrain_eval_samples: int = 1000
    finetune_samples: int = 4000
    eval_samples: int = 1000

    # bookkeeping
    log_interval: int = 50
    checkpoint_interval: int = 500
    seed: int = field(default_factory=lambda: int(os.environ.get("DEST_SEED", "0")))

    def __post_init__(self):
        _validate(self)

    @property
    def projection_dim(self) -> int:
        return self.projection_size or max(1, self.embedding_size // 2)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        if not isinstance(data, dict):
            raise ConfigError(f"Config must be a JSON object, got {type(data).__name__}")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        for key, value in data.items():
            _check_type(key, value, known[key])
        return cls(**data)

    @classmethod
    def from_json(cls, path: Path | str) -> TrainConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}")
        return cls.from_dict(data)

    @classmethod
    def full_scale(cls) -> TrainConfig:
        """Full-scale values (pre-training column, AGQA frame counts)."""
        return cls(
            embedding_size=768,
            num_layers=12,
            num_heads=12,
            ffn_size=3072,
            feature_size=1024,
            patch_count=576,
            patch_size=768,
            num_videos_k=8,
            num_frames_t=16,
            num_frames_t_eval=8,
            lr_base=1e-5,
            lr_video=5e-5,
            lr_mlp=2.5e-4,
            lr_ans=2e-5,
            warmup=0.03,
            batch_size=128,
            training_steps=60_000,
            training_epochs=4,
        )

    def replace(self, **changes: Any) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def diff(
        self, other: TrainConfig | dict[str, Any], keys: tuple[str, ...] | None = None
    ) -> dict[str, tuple[Any, Any]]:
        """Return {key: (self_value, other_value)} for every differing key."""
        theirs = other.to_dict() if isinstance(other, TrainConfig) else other
        ours = self.to_dict()
        keys = keys or tuple(ours)
        return {k: (ours.get(k), theirs.get(k)) for k in keys if ours.get(k) != theirs.get(k)}


def check_compatible(expected: TrainConfig, echo: dict[str, Any]) -> None:
    """Refuse a checkpoint whose data-shaping keys differ from the run config.

    Raises:
        ConfigError: listing every mismatched key as key=(run, checkpoint).
    """
    mismatched = expected.diff(echo, DATA_KEYS)
    if mismatched:
        details = ", ".join(f"{k}=({a!r}, {b!r})" for k, (a, b) in mismatched.items())
        raise ConfigError(f"Checkpoint is incompatible with run config: {details}")


def env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


def env_threads() -> int:
    return int(os.environ.get("DEST_NUM_THREADS", "1"))


def _check_type(key: str, value: Any, f: dataclasses.Field) -> None:
    expected = f.type if isinstance(f.type, str) else f.type.__name__
    if value is None:
        if "None" not in expected:
            raise ConfigError(f"{key} must not be null")
        return
    if expected.startswith("int") and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    if expected == "float" and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    if expected == "str" and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")


def _validate(c: TrainConfig) -> None:
    def report(message: str) -> None:
        raise ConfigError(message)

    # fmt: off
    for name in ("embedding_size", "num_layers", "num_heads", "ffn_size", "feature_size",
                 "patch_count", "patch_size", "max_video_length", "max_question_length",
                 "num_frames_t", "num_frames_t_eval", "batch_size", "training_steps",
                 "training_epochs", "log_interval", "checkpoint_interval"):
        if getattr(c, name) < 1:
            report(f"{name} must be >= 1, got {getattr(c, name)}")
    if c.embedding_size % c.num_heads:
        report(f"embedding_size {c.embedding_size} is not divisible by num_heads {c.num_heads}")
    if not 0.0 <= c.dropout < 1.0:
        report(f"dropout must be in [0, 1), got {c.dropout}")
    if not 0.0 <= c.warmup <= 1.0:
        report(f"warmup must be in [0, 1], got {c.warmup}")
    if c.loss_weighting not in LOSS_WEIGHTINGS:
        report(f"loss_weighting must be one of {', '.join(LOSS_WEIGHTINGS)}, got {c.loss_weighting!r}")
    if c.init_temperature <= 0:
        report(f"init_temperature must be > 0, got {c.init_temperature}")
    if c.projection_size is not None and c.projection_size < 1:
        report(f"projection_size must be >= 1, got {c.projection_size}")
    if c.event_count < 2 or c.attribute_count < 2:
        report("event_count and attribute_count must both be >= 2")
    if not 1 <= c.duration_min <= c.duration_max:
        report(f"need 1 <= duration_min <= duration_max, got [{c.duration_min}, {c.duration_max}]")
    if not 2 <= c.num_videos_k <= c.event_count:
        report(f"num_videos_k must be in [2, event_count], got {c.num_videos_k}")
    if c.num_videos_k > c.max_video_length:
        report("num_videos_k exceeds max_video_length")
    if c.noise_scale < 0 or c.min_signature_distance < 0:
        report("noise_scale and min_signature_distance must be >= 0")
    if min(c.pretrain_samples, c.pretrain_eval_samples, c.finetune_samples, c.eval_samples) < 1:
        report("dataset sizes must be >= 1")
    if c.grad_clip <= 0 or c.adam_eps <= 0 or c.weight_decay < 0:
        report("grad_clip and adam_eps must be > 0, weight_decay >= 0")
    if not (0 <= c.adam_beta1 < 1 and 0 <= c.adam_beta2 < 1):
        report("adam betas must be in [0, 1)")
    # fmt: on


class ConfigError(ValueError):
    """Raised when configuration is invalid or incompatible."""

    pass
