"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then one little-endian float64 block per tensor in the order the header lists.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import ModelDims, ModelParams
from .preprocess import PreprocessStats
from .schema import FeatureSchema, SchemaError, parse_schema, schema_fingerprint, schema_to_json
from .train import TrainConfig

MAGIC = b"TGCNCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    schema: FeatureSchema
    stats: PreprocessStats
    params: ModelParams
    train_config: TrainConfig
    threshold: float = 0.5
    created_at: str = ""
    format_version: int = FORMAT_VERSION

    @property
    def schema_fingerprint(self) -> str:
        return schema_fingerprint(self.schema)

    def check_schema(self, schema: FeatureSchema) -> None:
        if schema_fingerprint(schema) != self.schema_fingerprint:
            raise CheckpointError("cohort schema does not match the checkpoint's schema fingerprint")


def _timestamp(deterministic: bool) -> str:
    epoch = 0 if deterministic else int(os.environ.get("SOURCE_DATE_EPOCH", time.time()))
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(epoch))


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    header = {
        "format_version": ckpt.format_version,
        "schema_fingerprint": ckpt.schema_fingerprint,
        "schema": json.loads(schema_to_json(ckpt.schema)),
        "preprocess_stats": ckpt.stats.to_dict(),
        "dims": ckpt.params.dims.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "threshold": ckpt.threshold,
        "created_at": ckpt.created_at or _timestamp(ckpt.train_config.deterministic),
        "tensors": [{"name": k, "shape": list(ckpt.params[k].shape)} for k in names],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blocks = [np.ascontiguousarray(ckpt.params[k], dtype="<f8").tobytes() for k in names]
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blocks)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
    try:
        schema = parse_schema(json.dumps(header["schema"]))
    except SchemaError as exc:
        raise CheckpointError(f"checkpoint schema invalid: {exc}") from None
    if schema_fingerprint(schema) != header["schema_fingerprint"]:
        raise CheckpointError("checkpoint schema does not match its fingerprint")
    dims = ModelDims.from_dict(header["dims"])
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"truncated tensor block {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after the last tensor block")
    return Checkpoint(
        schema=schema,
        stats=PreprocessStats.from_dict(header["preprocess_stats"]),
        params=ModelParams(dims, tensors),
        train_config=TrainConfig(**header["train_config"]),
        threshold=header["threshold"],
        created_at=header["created_at"],
        format_version=header["format_version"],
    )


def save(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: Union[str, Path], expect_schema: Optional[FeatureSchema] = None) -> Checkpoint:
    ckpt = from_bytes(Path(path).read_bytes())
    if expect_schema is not None:
        ckpt.check_schema(expect_schema)
    return ckpt
