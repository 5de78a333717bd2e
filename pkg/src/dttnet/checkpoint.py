"""Checkpoint container.

Layout::

    b"DTTNETCK"                  8-byte magic
    uint32 little-endian         format version
    uint64 little-endian         header length in bytes
    header                       UTF-8 JSON (sorted keys)
    payload                      raw little-endian tensor bytes, in header order

The header holds the model config, free-form metadata (epoch, best
validation uSDR, ...), one ``{name, dtype, shape, offset, nbytes}`` record
per tensor and the SHA-256 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import DTTNet, ModelConfig

__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "Checkpoint",
    "save",
    "load",
    "read_header",
]

MAGIC = b"DTTNETCK"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: DTTNet
    config: ModelConfig
    metadata: dict = field(default_factory=dict)

    @property
    def best_usdr(self) -> float | None:
        return self.metadata.get("best_usdr")

    @property
    def epoch(self) -> int | None:
        return self.metadata.get("epoch")


def _serialize(model: torch.nn.Module) -> tuple[list[dict], bytes]:
    records, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.detach().cpu().contiguous().numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        records.append(
            {"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    return records, b"".join(chunks)


def save(model: DTTNet, path: str | Path, metadata: dict | None = None) -> None:
    records, payload = _serialize(model)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "metadata": metadata or {},
        "tensors": records,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def _read(path: Path) -> tuple[dict, bytes]:
    data = path.read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[20 : 20 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    payload = data[20 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return header, payload


def read_header(path: str | Path) -> dict:
    return _read(Path(path))[0]


def load(path: str | Path, config: ModelConfig | None = None) -> Checkpoint:
    """Rebuild the model stored at ``path``.

    When ``config`` is given it must equal the stored config exactly.
    """
    header, payload = _read(Path(path))
    stored = ModelConfig.from_dict(header["config"])
    if config is not None and config != stored:
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
    model = DTTNet(stored)
    if any(rec["dtype"] == "<f8" for rec in header["tensors"]):
        model.double()
    expected = model.state_dict()
    state = {}
    for rec in header["tensors"]:
        name = rec["name"]
        if name not in expected or list(expected[name].shape) != rec["shape"]:
            raise CheckpointError(f"{path}: unexpected tensor {name} {rec['shape']}")
        buf = payload[rec["offset"] : rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(buf, dtype=rec["dtype"]).reshape(rec["shape"])
        state[name] = torch.from_numpy(arr.copy())
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    return Checkpoint(model, stored, header["metadata"])
