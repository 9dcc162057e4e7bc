"""Checkpoint files.

    b"DSTC", version <u4, header length <u4, UTF-8 JSON header
    then until EOF, one entry per tensor:
        name length <u4, name bytes, rank <u4, dims <u4 * rank, values <f4

The JSON header carries the config echo, step counter, model kind, stage and
answer vocabulary. Parameter entries use state_dict names; optimizer entries
are prefixed with "optim.".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from dest_qa.config import TrainConfig, check_compatible
from dest_qa.dataset_io import BinaryReader, FormatError
from dest_qa.numeric import AdamW
from dest_qa.pipeline import AnswerSelector, build_model
from dest_qa.utils.log import log

CHECKPOINT_MAGIC = b"DSTC"
CHECKPOINT_VERSION = 1
OPTIM_PREFIX = "optim."


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    kind: str
    vocab_size: int
    parameters: dict[str, torch.Tensor]
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    stage: str = "pretrain"
    answer_vocabulary: list[int] = field(default_factory=list)
    answer_tokens: list[list[int]] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def header(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "step": self.step,
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "stage": self.stage,
            "answer_vocabulary": self.answer_vocabulary,
            "answer_tokens": self.answer_tokens,
            "extra": self.extra,
        }

    def build(self, expected: TrainConfig | None = None) -> AnswerSelector:
        """Model with the stored parameters, in eval mode.

        Raises:
            ConfigError: if `expected` disagrees on any data-shaping key.
        """
        if expected is not None:
            check_compatible(expected, self.config.to_dict())
        model = build_model(self.config, self.vocab_size, self.kind)
        try:
            model.load_state_dict(self.parameters, strict=True)
        except RuntimeError as e:
            raise FormatError(f"checkpoint parameters do not fit a {self.kind} model: {e}", 0)
        model.eval()
        return model


def from_model(
    model: AnswerSelector,
    step: int,
    stage: str,
    optimizer: AdamW | None = None,
    answer_vocabulary: list[int] | None = None,
    answer_tokens: list[list[int]] | None = None,
    extra: dict[str, Any] | None = None,
) -> Checkpoint:
    names = {p: n for n, p in model.named_parameters()}
    return Checkpoint(
        config=model.config,
        step=step,
        kind=model.kind,
        vocab_size=model.vocab_size,
        parameters={n: t.detach().clone() for n, t in model.state_dict().items()},
        optimizer=optimizer.export_state(names) if optimizer is not None else {},
        stage=stage,
        answer_vocabulary=list(answer_vocabulary or []),
        answer_tokens=[list(t) for t in answer_tokens or []],
        extra=dict(extra or {}),
    )


def _entry(name: str, tensor: torch.Tensor) -> bytes:
    encoded = name.encode("utf-8")
    values = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
    return (
        np.array([len(encoded)], dtype="<u4").tobytes()
        + encoded
        + np.array([values.ndim, *values.shape], dtype="<u4").tobytes()
        + values.astype("<f4").tobytes()
    )


def save_checkpoint(checkpoint: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(checkpoint.header(), sort_keys=True).encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC)
    out += np.array([CHECKPOINT_VERSION, len(header)], dtype="<u4").tobytes()
    out += header
    for name, tensor in checkpoint.parameters.items():
        out += _entry(name, tensor)
    for name, tensor in checkpoint.optimizer.items():
        out += _entry(name, tensor)
    path.write_bytes(bytes(out))
    log(f"saved checkpoint step {checkpoint.step} to {path}")
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    """Raises FormatError on bad magic, truncation or a malformed header."""
    path = Path(path)
    try:
        reader = BinaryReader(path.read_bytes(), path.name)
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}", 0)
    reader.expect_magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)

    header_at = reader.offset
    (length,) = (int(v) for v in reader.u32())
    try:
        header = json.loads(reader.take(length).decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path.name}: malformed header ({e})", header_at)

    parameters: dict[str, torch.Tensor] = {}
    optimizer: dict[str, torch.Tensor] = {}
    while not reader.at_end():
        entry_at = reader.offset
        (name_length,) = (int(v) for v in reader.u32())
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path.name}: entry name is not UTF-8", entry_at)
        (rank,) = (int(v) for v in reader.u32())
        dims = [int(d) for d in reader.u32(rank)]
        values = reader.f32(int(np.prod(dims, dtype=np.int64)))
        tensor = torch.from_numpy(values.reshape(dims).copy())
        (optimizer if name.startswith(OPTIM_PREFIX) else parameters)[name] = tensor

    return Checkpoint(
        config=config,
        step=int(header["step"]),
        kind=header["kind"],
        vocab_size=int(header["vocab_size"]),
        parameters=parameters,
        optimizer=optimizer,
        stage=header.get("stage", "pretrain"),
        answer_vocabulary=list(header.get("answer_vocabulary", [])),
        answer_tokens=[list(t) for t in header.get("answer_tokens", [])],
        extra=dict(header.get("extra", {})),
    )
