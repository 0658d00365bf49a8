"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CVRS"                 magic
    uint32                  format version
    uint32                  header length in bytes
    header                  UTF-8 JSON, sorted keys, no whitespace
    payload                 float32 LE tensors, in the header's declared order

The header carries the architecture config, its SHA-256 hash, the tensor
table ``[[name, shape], ...]`` and optional free-form ``meta`` (run config,
seed).  Nothing time- or host-dependent is written, so equal models give
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import (
    BadMagicError,
    CheckpointError,
    ConfigHashError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .builders import build_model
from .graph import ModelGraph, config_hash

MAGIC = b"CVRS"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def dumps_checkpoint(model: ModelGraph, meta: dict | None = None) -> bytes:
    header = {
        "config": model.config,
        "config_hash": model.config_hash,
        "tensors": [[name, list(t.shape)] for name, t in model.tensors.items()],
    }
    if meta:
        header["meta"] = meta
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)), hbytes]
    for t in model.tensors.values():
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: ModelGraph, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(dumps_checkpoint(model, meta))
    return path


def read_header(blob: bytes) -> tuple[dict, int]:
    """Parse and validate the prefix and header; returns (header, payload offset)."""
    if len(blob) < 4:
        raise TruncatedCheckpointError(f"file is {len(blob)} bytes, too short for a checkpoint")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}; not a covct checkpoint")
    if len(blob) < _PREFIX.size:
        raise TruncatedCheckpointError("checkpoint ends inside the fixed prefix")
    _, version, hlen = _PREFIX.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    end = _PREFIX.size + hlen
    if len(blob) < end:
        raise TruncatedCheckpointError("checkpoint ends inside the header")
    try:
        header = json.loads(blob[_PREFIX.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    for key in ("config", "config_hash", "tensors"):
        if key not in header:
            raise CheckpointError(f"checkpoint header lacks {key!r}")
    if config_hash(header["config"]) != header["config_hash"]:
        raise ConfigHashError("checkpoint header hash does not match its own config")
    return header, end


def loads_checkpoint(blob: bytes, expect=None, precision="f32") -> ModelGraph:
    header, offset = read_header(blob)
    if expect is not None:
        expected_hash = expect.config_hash if isinstance(expect, ModelGraph) else config_hash(expect)
        if expected_hash != header["config_hash"]:
            raise ConfigHashError(
                f"checkpoint config hash {header['config_hash'][:12]} does not match expected {expected_hash[:12]}"
            )
    model = build_model(header["config"], seed=0, precision="f32")
    table = header["tensors"]
    if [name for name, _ in table] != list(model.tensors):
        raise CheckpointError("checkpoint tensor table does not match the architecture it declares")
    for name, shape in table:
        t = model.tensors[name]
        if tuple(shape) != t.shape:
            raise CheckpointError(f"tensor {name!r}: stored shape {shape} != architecture shape {t.shape}")
        nbytes = 4 * t.data.size
        if offset + nbytes > len(blob):
            raise TruncatedCheckpointError(f"checkpoint truncated inside tensor {name!r}")
        t.data = np.frombuffer(blob, dtype="<f4", count=t.data.size, offset=offset).reshape(t.shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} unexpected trailing bytes after the last tensor")
    if precision != "f32":
        model.astype(precision)
    return model


def load_checkpoint(path, expect=None, precision="f32") -> ModelGraph:
    """Load a checkpoint, optionally requiring it to match ``expect``'s config.

    ``expect`` may be a :class:`ModelGraph` or a config dict.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads_checkpoint(blob, expect, precision)


def checkpoint_meta(path) -> dict:
    header, _ = read_header(Path(path).read_bytes())
    return header.get("meta", {})
