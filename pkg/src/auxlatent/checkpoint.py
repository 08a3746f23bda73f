"""Binary checkpoint format.

Layout (little-endian)::

    b"LGEO1"  uint32 version  uint32 n  <n bytes of JSON config>
    uint32 count  then per parameter:
        uint16 name_len  name  uint8 ndim  ndim x uint32 extent  float64 data

Parameters are written in the model's named-parameter order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .latent_model import LatentTransformer, ModelConfig

MAGIC = b"LGEO1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: LatentTransformer, path: str | Path, meta: dict | None = None) -> None:
    header = {"model": asdict(model.cfg), "completed_stage": model.completed_stage, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    params = list(model.params())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            arr = p.detach().cpu().numpy().astype("<f8", copy=False)
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> tuple[LatentTransformer, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return _parse(data, path)
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc


def _parse(data: bytes, path) -> tuple[LatentTransformer, dict]:
    if data[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = 5
    version, n = struct.unpack_from("<II", data, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, loader expects {VERSION}")
    header = json.loads(data[off:off + n].decode("utf-8"))
    off += n
    model = LatentTransformer(ModelConfig(**header["model"]))
    model.completed_stage = header.get("completed_stage", 0)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    named = dict(model.named_parameters())
    seen = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        if name not in named:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if tuple(named[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: shape mismatch for {name}: {shape} vs {tuple(named[name].shape)}")
        with torch.no_grad():
            named[name].copy_(torch.from_numpy(arr.copy()))
        seen.append(name)
    missing = set(named) - set(seen)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return model, header
