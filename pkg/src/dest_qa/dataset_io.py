"""Dataset files: a JSON Lines manifest next to a little-endian feature blob.

Layout of a dataset directory:

    manifest.jsonl   one record per sample (see _record)
    features.dstf    b"DSTF", version <u4, then per sample one or two matrices,
                     each [rows, cols] as <u4 followed by rows*cols <f4 values

TRM samples store their feature matrix. QA samples store the feature matrix
followed by the frame patches flattened to [M, N*P].

Public API
----------
write_dataset(samples, path)
read_dataset(path) -> list[TrmSample] | list[QaSample]
verify_dataset(path) -> int
    Cross-checks every manifest record against the blob; returns the count.
FormatError
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from dest_qa.qa import QaSample, QuestionType
from dest_qa.trm import Template, TrmSample
from dest_qa.utils.log import log
from dest_qa.world import Manifest

MANIFEST_FILE = "manifest.jsonl"
BLOB_FILE = "features.dstf"
BLOB_MAGIC = b"DSTF"
BLOB_VERSION = 1


class BinaryReader:
    """Sequential reader over a byte buffer that reports byte offsets on failure."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.what = what
        self.offset = 0

    def at_end(self) -> bool:
        return self.offset == len(self.data)

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated, need {n} bytes, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, count: int = 1) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4")

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4")

    def expect_magic(self, magic: bytes, version: int) -> None:
        if self.take(len(magic)) != magic:
            raise FormatError(f"{self.what}: bad magic, expected {magic!r}", 0)
        found = int(self.u32()[0])
        if found != version:
            raise FormatError(f"{self.what}: unsupported version {found}", len(magic))

    def matrix(self) -> np.ndarray:
        rows, cols = (int(v) for v in self.u32(2))
        return self.f32(rows * cols).reshape(rows, cols).copy()


def matrix_bytes(matrix: np.ndarray) -> bytes:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    return np.array(matrix.shape, dtype="<u4").tobytes() + matrix.tobytes()


def _record(index: int, sample: TrmSample | QaSample, blob_offset: int) -> dict[str, Any]:
    manifest = sample.manifest
    record: dict[str, Any] = {
        "id": index,
        "template": sample.template.value if isinstance(sample, TrmSample) else sample.template,
        "clip_boundaries": manifest.boundaries,
        "question_token_ids": list(sample.question),
        "blob_offset": blob_offset,
        "clips": manifest.to_list(),
    }
    if isinstance(sample, TrmSample):
        record |= {
            "kind": "trm",
            "caption_token_ids": sample.captions,
            "candidate_indices": sample.candidate_indices,
            "label": sample.label,
            "reference": sample.reference,
        }
    else:
        record |= {
            "kind": "qa",
            "caption_token_ids": manifest.captions,
            "candidate_indices": [],
            "label": None,
            "question_type": sample.question_type.value,
            "answer": sample.answer,
            "attribute_id": sample.attribute_id,
            "event_ids": manifest.event_ids,
            "patch_count": int(sample.frames.shape[1]),
        }
    return record


def write_dataset(samples: Sequence[TrmSample | QaSample], path: Path | str) -> Path:
    """Write samples as manifest.jsonl + features.dstf under directory `path`."""
    if not samples:
        raise ValueError("write_dataset: no samples")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    blob = bytearray(BLOB_MAGIC + np.array([BLOB_VERSION], dtype="<u4").tobytes())
    lines = []
    for i, sample in enumerate(samples):
        record = _record(i, sample, len(blob))
        blob += matrix_bytes(sample.features)
        if isinstance(sample, QaSample):
            record["frames_offset"] = len(blob)
            blob += matrix_bytes(sample.frames.reshape(sample.frames.shape[0], -1))
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))

    (path / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (path / BLOB_FILE).write_bytes(bytes(blob))
    log(f"wrote {len(samples)} samples to {path} ({len(blob)} blob bytes)")
    return path


def _read_manifest(path: Path) -> list[dict[str, Any]]:
    try:
        raw = (path / MANIFEST_FILE).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing {path / MANIFEST_FILE}", 0)
    records, offset = [], 0
    for line in raw.splitlines(keepends=True):
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"{MANIFEST_FILE}: invalid JSON ({e.msg})", offset + e.pos)
        offset += len(line)
    if not records:
        raise FormatError(f"{MANIFEST_FILE}: empty manifest", 0)
    return records


def _read_blob(path: Path) -> BinaryReader:
    try:
        data = (path / BLOB_FILE).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing {path / BLOB_FILE}", 0)
    reader = BinaryReader(data, BLOB_FILE)
    reader.expect_magic(BLOB_MAGIC, BLOB_VERSION)
    return reader


def _decode(record: dict[str, Any], reader: BinaryReader) -> TrmSample | QaSample:
    start = reader.offset
    if record.get("blob_offset") != start:
        raise FormatError(
            f"sample {record.get('id')}: manifest blob_offset {record.get('blob_offset')} "
            f"does not match blob position",
            start,
        )
    features = reader.matrix()
    manifest = Manifest.from_list(record["clips"])
    if features.shape[0] != record["clip_boundaries"][-1] or manifest.boundaries != record["clip_boundaries"]:
        raise FormatError(
            f"sample {record['id']}: {features.shape[0]} blob rows, manifest says "
            f"{record['clip_boundaries'][-1]}",
            start,
        )

    if record["kind"] == "trm":
        return TrmSample(
            features=features,
            question=record["question_token_ids"],
            template=Template(record["template"]),
            reference=record["reference"],
            captions=record["caption_token_ids"],
            candidate_indices=record["candidate_indices"],
            label=record["label"],
            manifest=manifest,
        )
    if record["kind"] == "qa":
        frames_at = reader.offset
        flat = reader.matrix()
        if flat.shape[0] != features.shape[0]:
            raise FormatError(f"sample {record['id']}: frame rows differ from feature rows", frames_at)
        return QaSample(
            features=features,
            frames=flat.reshape(flat.shape[0], record["patch_count"], -1),
            question=record["question_token_ids"],
            question_type=QuestionType(record["question_type"]),
            template=record["template"],
            answer=record["answer"],
            manifest=manifest,
            attribute_id=record["attribute_id"],
        )
    raise FormatError(f"sample {record.get('id')}: unknown kind {record.get('kind')!r}", start)


def read_dataset(path: Path | str) -> list[TrmSample] | list[QaSample]:
    """Read a dataset directory written by write_dataset.

    Raises:
        FormatError: on bad magic, truncation or manifest/blob disagreement.
    """
    path = Path(path)
    records = _read_manifest(path)
    reader = _read_blob(path)
    try:
        samples = [_decode(r, reader) for r in records]
    except (KeyError, IndexError, TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{MANIFEST_FILE}: malformed record ({e})", reader.offset)
    if not reader.at_end():
        raise FormatError(f"{BLOB_FILE}: trailing bytes after last sample", reader.offset)
    log(f"read {len(samples)} samples from {path}")
    return samples


def verify_dataset(path: Path | str) -> int:
    return len(read_dataset(path))


class FormatError(ValueError):
    """Malformed dataset or checkpoint file; `offset` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
