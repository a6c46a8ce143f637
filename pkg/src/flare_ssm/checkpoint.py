"""Binary parameter checkpoints.

Layout: 4-byte magic, ``u32`` version, ``u32`` manifest length, UTF-8 JSON
manifest ``{"params": [{"name", "shape"}, ...], "meta": {...}}``, then every
tensor as raw little-endian float32 in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

VERSION = 1


def save_params(path, state: dict[str, torch.Tensor], magic: bytes, meta: dict | None = None) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    manifest = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(manifest)))
        fh.write(manifest)
        for v in state.values():
            fh.write(v.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())


def load_params(path, magic: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    version, mlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(blob[12 : 12 + mlen].decode("utf-8"))
    offset = 12 + mlen
    state = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * n
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return state, manifest["meta"]


def save_module(path, module: torch.nn.Module, magic: bytes, meta: dict | None = None) -> None:
    save_params(path, module.state_dict(), magic, meta)


def load_module(path, module: torch.nn.Module, magic: bytes) -> dict:
    state, meta = load_params(path, magic)
    dtype = next(module.parameters()).dtype
    module.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    return meta
