"""Portable checkpoints.

File layout (all integers little-endian)::

    magic       8 bytes   b"VAEATTN\\x00"
    version     uint32
    header_len  uint64
    header      UTF-8 JSON: config, meta, tensor table (name, dtype, shape,
                offset, nbytes); keys sorted so the bytes are canonical
    payload     concatenated little-endian tensor data
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointFormatError
from .model import ConvVAE, VaeConfig

MAGIC = b"VAEATTN\x00"
VERSION = 1
_DTYPES = {"<f4": torch.float32, "<f8": torch.float64}


@dataclass
class Checkpoint:
    config: VaeConfig
    parameters: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ConvVAE, meta=None, extras=None) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.config, params, dict(meta or {}), dict(extras or {}))

    def to_model(self) -> ConvVAE:
        model = ConvVAE(self.config)
        dtype = torch.float64 if any(v.dtype == np.float64 for v in self.parameters.values()) \
            else torch.float32
        model = model.to(dtype)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.parameters.items()})
        return model.eval()

    def checksum(self) -> str:
        """SHA-256 over the canonical little-endian parameter bytes."""
        h = hashlib.sha256()
        for name in sorted(self.parameters):
            h.update(name.encode())
            h.update(_le(self.parameters[name]).tobytes())
        return h.hexdigest()


def _le(arr):
    arr = np.asarray(arr)
    code = "<f8" if arr.dtype == np.float64 else "<f4"
    return np.ascontiguousarray(arr, dtype=code)


def as_model(obj) -> ConvVAE:
    """Accept a ``ConvVAE`` or ``Checkpoint`` wherever a model is needed."""
    if isinstance(obj, ConvVAE):
        return obj
    if isinstance(obj, Checkpoint):
        return obj.to_model()
    model = getattr(obj, "model_", None)
    if isinstance(model, ConvVAE):
        return model
    raise TypeError(f"expected ConvVAE, Checkpoint or fitted estimator, got {type(obj).__name__}")


def dumps(ckpt: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    groups = [("param", ckpt.parameters), ("extra", ckpt.extras)]
    for group, tensors in groups:
        for name, value in tensors.items():
            data = _le(value)
            raw = data.tobytes()
            table.append({"group": group, "name": name, "dtype": data.dtype.str,
                          "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = json.dumps({"config": ckpt.config.to_dict(), "meta": ckpt.meta, "tensors": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic")
    if len(data) < 20:
        raise CheckpointFormatError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from None
    payload = data[20 + hlen:]
    params, extras = {}, {}
    for entry in header["tensors"]:
        if entry["dtype"] not in _DTYPES or entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointFormatError(f"bad tensor entry {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=int(np.prod(entry["shape"])),
                            offset=entry["offset"]).reshape(entry["shape"]).copy()
        (params if entry["group"] == "param" else extras)[entry["name"]] = arr
    return Checkpoint(VaeConfig.from_dict(header["config"]), params, header["meta"], extras)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
