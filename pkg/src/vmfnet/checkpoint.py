"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes   b"VMFNETCK"
    version   u32
    meta_len  u64, then meta_len bytes of UTF-8 JSON
    count     u32, then ``count`` tensor records:
        name_len u16, name (UTF-8)
        dtype_len u8, numpy dtype string (e.g. "<f4")
        ndim u8, ndim x u64 shape
        nbytes u64, raw little-endian data

Model tensors are named ``model/<state-dict key>``; optimizer moments are
named ``optim/<param index>/<key>``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .networks import ModelConfig, VMFNet
from .vmf import project_kernels

MAGIC = b"VMFNETCK"
VERSION = 1


@dataclass
class ModelState:
    model: VMFNet
    optimizer_state: dict | None = None
    iteration: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().contiguous().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _pack_tensor(name: str, t: torch.Tensor) -> bytes:
    a = _to_numpy(t)
    name_b = name.encode()
    dtype_b = a.dtype.str.encode()
    data = a.tobytes()
    return b"".join([
        struct.pack("<H", len(name_b)), name_b,
        struct.pack("<B", len(dtype_b)), dtype_b,
        struct.pack("<B", a.ndim), struct.pack(f"<{a.ndim}Q", *a.shape),
        struct.pack("<Q", len(data)), data,
    ])


def write_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Atomically write ``tensors`` and ``meta`` to ``path``."""
    path = Path(path)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_b)), meta_b,
             struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(k, v) for k, v in tensors.items()]
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(b"".join(parts))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a vmfnet checkpoint")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path} is truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path} is truncated")
        out = buf[pos:pos + n]
        pos += n
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = take("<Q")
    meta = json.loads(take_bytes(meta_len))
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n,) = take("<H")
        name = take_bytes(n).decode()
        (n,) = take("<B")
        dtype = np.dtype(take_bytes(n).decode())
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q")
        (nbytes,) = take("<Q")
        a = np.frombuffer(take_bytes(nbytes), dtype=dtype).reshape(shape)
        tensors[name] = torch.from_numpy(a.astype(dtype.newbyteorder("="), copy=True))
    if pos != len(buf):
        raise CheckpointError(f"{path} has {len(buf) - pos} trailing bytes")
    return tensors, meta


def save_checkpoint(path: str | Path, state: ModelState) -> None:
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    opt_meta = None
    if state.optimizer_state is not None:
        opt_meta = {"param_groups": state.optimizer_state["param_groups"]}
        for idx, st in state.optimizer_state["state"].items():
            for key, v in st.items():
                tensors[f"optim/{idx}/{key}"] = v if torch.is_tensor(v) else torch.tensor(v)
    meta = {
        "model_config": state.model.config.to_dict(),
        "iteration": state.iteration,
        "seed": state.seed,
        "optimizer": opt_meta,
        **state.meta,
    }
    write_tensors(path, tensors, meta)


def load_checkpoint(path: str | Path) -> ModelState:
    tensors, meta = read_tensors(path)
    try:
        model = VMFNet(ModelConfig(**meta["model_config"]))
        model.to(tensors["model/kernels.weight"].dtype)
        model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    except (KeyError, TypeError, RuntimeError) as e:
        raise CheckpointError(f"{path}: inconsistent checkpoint: {e}") from e
    project_kernels(model.kernels.weight.detach())  # rejects collapsed kernel rows
    model.eval()
    opt_state = None
    if meta.get("optimizer"):
        state: dict[int, dict] = {}
        for k, v in tensors.items():
            if k.startswith("optim/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = v
        opt_state = {"state": state, "param_groups": meta["optimizer"]["param_groups"]}
    extra = {k: v for k, v in meta.items() if k not in ("model_config", "iteration", "seed", "optimizer")}
    return ModelState(model, opt_state, int(meta.get("iteration", 0)), int(meta.get("seed", 0)), extra)
