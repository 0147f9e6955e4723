"""``EGONN1`` checkpoint container.

Layout (little-endian): the 6 magic bytes ``EGONN1`` followed by records until
end of file. Each record is ``name_len: u64``, ``name: utf-8``, ``rank: u64``,
``dims: rank × u64`` and ``prod(dims)`` float32 values.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EGONN1"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not an EGONN1 checkpoint")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated record at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    return out


def module_state(module) -> dict[str, np.ndarray]:
    """Parameters and buffers of a :class:`~egonn.sparse_ad.layers.Module` by name."""
    state = {name: p.value for name, p in module.named_parameters()}
    for name, owner, attr in module.named_buffers():
        state[name] = getattr(owner, attr)
    return state


def load_module_state(module, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
    params = dict(module.named_parameters())
    buffers = {name: (owner, attr) for name, owner, attr in module.named_buffers()}
    missing = [n for n in list(params) + list(buffers) if n not in state]
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks {missing[:5]}")
    for name, p in params.items():
        if name in state:
            if state[name].shape != p.value.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.value.shape}")
            p.value = np.array(state[name], dtype=p.value.dtype)
            p.grad = np.zeros_like(p.value)
    for name, (owner, attr) in buffers.items():
        if name in state:
            cur = getattr(owner, attr)
            setattr(owner, attr, np.array(state[name], dtype=cur.dtype))


def save_checkpoint(path, module, extra: Mapping[str, np.ndarray] | None = None) -> None:
    arrays = dict(module_state(module))
    if extra:
        arrays.update(extra)
    save_arrays(path, arrays)


def load_checkpoint(path, module, strict: bool = True) -> dict[str, np.ndarray]:
    """Load module state; returns the records that did not belong to the module."""
    arrays = load_arrays(path)
    load_module_state(module, arrays, strict=strict)
    own = {n for n, _ in module.named_parameters()} | {n for n, _, _ in module.named_buffers()}
    return {k: v for k, v in arrays.items() if k not in own}
