"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DCMBERT1"                 8-byte magic
    u32 format version
    u64 metadata length
    metadata                    UTF-8 JSON: config, tensor manifest, training metadata
    payload                     float32 LE tensors at the manifest offsets
    u64 digest                  blake2b-64 of every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderModel, ModelConfig, audit_param_count, param_count, parameter_shapes

MAGIC = b"DCMBERT1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DIGEST = struct.Struct("<Q")


class CheckpointError(Exception):
    pass


class IntegrityError(CheckpointError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    model: EncoderModel
    meta: dict


def _digest(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def to_bytes(model: EncoderModel, meta: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"config": model.config.to_dict(), "tensors": manifest, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)
    return body + _DIGEST.pack(_digest(body))


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size + _DIGEST.size:
        raise IntegrityError("truncated header", len(data))
    magic, version, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise IntegrityError("bad magic", 0)
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    meta_end = _HEADER.size + meta_len
    if meta_end + _DIGEST.size > len(data):
        raise IntegrityError("metadata block runs past end of file", len(data))
    body_end = len(data) - _DIGEST.size
    (stored,) = _DIGEST.unpack_from(data, body_end)
    if stored != _digest(data[:body_end]):
        raise IntegrityError("content digest mismatch", body_end)
    try:
        header = json.loads(data[_HEADER.size:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable metadata: {exc}", _HEADER.size) from None

    config = ModelConfig.from_dict(header["config"])
    payload = memoryview(data)[meta_end:body_end]
    expected = parameter_shapes(config)
    state = {}
    spans = []
    for entry in header["tensors"]:
        name, shape, off, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        if expected.get(name) != shape or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise IntegrityError(f"manifest entry {name!r} disagrees with config", meta_end + off)
        if off < 0 or off + nbytes > len(payload):
            raise IntegrityError(f"tensor {name!r} out of bounds", meta_end + off)
        spans.append((off, off + nbytes, name))
        state[name] = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape)
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise IntegrityError(f"tensors {a!r} and {b!r} overlap", meta_end + start)
    if set(state) != set(expected):
        raise IntegrityError("manifest does not list every parameter", meta_end)

    model = EncoderModel.from_state_dict(config, state)
    if audit_param_count(model)["counted"] != param_count(config):
        raise IntegrityError("parameter audit disagrees with config", meta_end)
    return Checkpoint(version, config, model, header["meta"])


def save_checkpoint(model: EncoderModel, meta: dict | None, path) -> bytes:
    data = to_bytes(model, meta)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
