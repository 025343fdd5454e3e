"""Model file format.

Layout::

    b"RGRM" | u16 version | u32 manifest length | manifest (UTF-8 JSON, sorted keys)
    | payload: little-endian float64 tensors, concatenated in manifest order
    | u32 CRC32 of payload

The manifest lists tensor names, shapes and element offsets and carries the
model config, training config and fitted normalizer, so a model file is
enough to appraise new records.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Mapping

import numpy as np

from .encoding import Normalizer
from .errors import ChecksumError, ModelFileError
from .model import ModelConfig, ModelParams
from .training import TrainConfig

MAGIC = b"RGRM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


def model_bytes(params: ModelParams, normalizer: Normalizer, config: TrainConfig | None = None) -> bytes:
    state = params.state_dict()
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "tensors": entries,
        "model_config": params.config.to_dict(),
        "train_config": config.to_dict() if config else None,
        "normalizer": normalizer.to_dict(),
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)) + mbytes + payload + _CRC.pack(zlib.crc32(payload))


def save_model(params: ModelParams, normalizer: Normalizer, config: TrainConfig | None, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(params, normalizer, config))


def parse_model(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _HEADER.size:
        raise ChecksumError("model file truncated inside the header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFileError("not a model file (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"model format version {version} unsupported (expected {FORMAT_VERSION})")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise ChecksumError("model file truncated inside the manifest")
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"model manifest corrupted: {exc}") from None
    n = sum(e["count"] for e in manifest["tensors"])
    body = blob[start + mlen:]
    if len(body) != 8 * n + _CRC.size:
        raise ChecksumError(f"model payload is {len(body)} bytes, expected {8 * n + _CRC.size}")
    payload, (crc,) = body[:-_CRC.size], _CRC.unpack(body[-_CRC.size:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("model payload CRC32 mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    state = {}
    for e in manifest["tensors"]:
        state[e["name"]] = flat[e["offset"]:e["offset"] + e["count"]].astype(np.float64).reshape(e["shape"])
    return manifest, state


def load_model(path: str | os.PathLike, into: ModelParams | None = None) -> tuple[ModelParams, Normalizer, TrainConfig | None]:
    """Read a model file; with ``into``, load into an existing session's parameters.

    Loading into parameters of a different shape raises ShapeError naming the tensor.
    """
    with open(path, "rb") as fh:
        manifest, state = parse_model(fh.read())
    normalizer = Normalizer.from_dict(manifest["normalizer"])
    tcfg = TrainConfig.from_dict(manifest["train_config"]) if manifest.get("train_config") else None
    if into is None:
        into = ModelParams.init(ModelConfig(**manifest["model_config"]))
    into.load_state_dict(state)
    return into, normalizer, tcfg


def states_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    """Bit-exact comparison of two state dicts."""
    if list(a) != list(b):
        return False
    return all(a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)

