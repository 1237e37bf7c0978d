"""DQCK checkpoint files.

Layout (little-endian)::

    b"DQCK" | u32 version | u32 meta_len | meta JSON (utf-8) | u32 n_blobs
    n_blobs x (u32 name_len | name | u32 rank | rank x u32 dims | f32 data)

The meta JSON holds the run configuration and training state scalars.
"""
from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .errors import FormatError, UnsupportedVersionError

MAGIC = b"DQCK"
VERSION = 1


def write_checkpoint(path, meta: dict, blobs: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated checkpoint reading {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    try:
        meta = json.loads(r.take(r.u32("meta length"), "meta"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}", 12) from exc
    blobs = {}
    for _ in range(r.u32("blob count")):
        name = r.take(r.u32("name length"), "name").decode(errors="replace")
        rank = r.u32("rank")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name}", r.pos)
        dims = [r.u32("dims") for _ in range(rank)]
        n = int(np.prod(dims, dtype=np.int64))
        blobs[name] = np.frombuffer(r.take(4 * n, name), dtype="<f4").reshape(tuple(dims)).copy()
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes", r.pos)
    return meta, blobs


def model_blobs(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().float().numpy() for k, v in model.state_dict().items()}


def optimizer_blobs(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        for key in ("exp_avg", "exp_avg_sq", "step"):
            out[f"optim.{key}/{name}"] = torch.as_tensor(state[key]).detach().float().numpy()
    return out


def load_model_blobs(model: torch.nn.Module, blobs: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = [k for k in state if k not in blobs]
    if missing:
        raise FormatError(f"checkpoint lacks weights {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for k, v in state.items():
        if tuple(blobs[k].shape) != tuple(v.shape):
            raise FormatError(f"weight {k} has shape {blobs[k].shape}, model expects {tuple(v.shape)}")
    model.load_state_dict({k: torch.from_numpy(blobs[k]).to(v.dtype) for k, v in state.items()})


def load_optimizer_blobs(model, optimizer, blobs) -> None:
    for name, p in model.named_parameters():
        key = f"optim.exp_avg/{name}"
        if key not in blobs:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(blobs[f"optim.step/{name}"])),
            "exp_avg": torch.from_numpy(blobs[key]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(blobs[f"optim.exp_avg_sq/{name}"]).to(p.dtype),
        }
