"""Single-file binary weight snapshots.

Layout (all integers little-endian):

    magic   b"DSWA"
    u32     format version (currently 1)
    u16+s   config hash (utf-8)
    u64     training step
    u32     number of parameter blocks
    blocks, sorted by name:
        u16+s   block name (utf-8)
        u8      ndim
        u32*ndim  shape
        f32*N   data, C-order

Blocks are written in sorted name order with float32 payloads, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

MAGIC = b"DSWA"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class WeightArchive:
    version: int
    config_hash: str
    step: int
    blocks: dict[str, np.ndarray]


def save_weights(
    path: str | Path,
    blocks: dict[str, np.ndarray],
    config_hash: str = "",
    step: int = 0,
) -> None:
    if step < 0:
        raise ValidationError("step must be >= 0")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        hash_bytes = config_hash.encode("utf-8")
        f.write(struct.pack("<H", len(hash_bytes)))
        f.write(hash_bytes)
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            arr = np.asarray(blocks[name], dtype="<f4", order="C")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<B", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValidationError("weight archive is truncated")
    return data


def load_weights(path: str | Path) -> WeightArchive:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValidationError(f"{path}: not a weight archive (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != FORMAT_VERSION:
            raise ValidationError(
                f"{path}: unsupported archive version {version} "
                f"(expected {FORMAT_VERSION})"
            )
        (hash_len,) = struct.unpack("<H", _read_exact(f, 2))
        config_hash = _read_exact(f, hash_len).decode("utf-8")
        (step,) = struct.unpack("<Q", _read_exact(f, 8))
        (n_blocks,) = struct.unpack("<I", _read_exact(f, 4))
        blocks: dict[str, np.ndarray] = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim)) if ndim else ()
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
            blocks[name] = data.reshape(shape).copy()
        if f.read(1):
            raise ValidationError(f"{path}: trailing bytes after last block")
    return WeightArchive(version=version, config_hash=config_hash, step=step, blocks=blocks)


def module_blocks(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Float32 copies of everything in the module's state dict."""
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def save_module(
    path: str | Path,
    module: torch.nn.Module,
    config_hash: str = "",
    step: int = 0,
) -> None:
    save_weights(path, module_blocks(module), config_hash=config_hash, step=step)


def load_module(
    path: str | Path,
    module: torch.nn.Module,
    expected_hash: str | None = None,
) -> WeightArchive:
    """Load an archive into ``module`` in place; returns the archive.

    Block names must exactly match the module's state dict; shapes are
    checked per block.  ``expected_hash`` (when given) must match the
    stored config hash.
    """
    archive = load_weights(path)
    if expected_hash is not None and archive.config_hash != expected_hash:
        raise ValidationError(
            f"archive config hash {archive.config_hash!r} does not match "
            f"expected {expected_hash!r}"
        )
    apply_blocks(module, archive.blocks)
    return archive


def apply_blocks(module: torch.nn.Module, blocks: dict[str, np.ndarray]) -> None:
    """Copy named blocks into the module's state dict (strict matching)."""
    state = module.state_dict()
    missing = sorted(set(state) - set(blocks))
    unexpected = sorted(set(blocks) - set(state))
    if missing or unexpected:
        raise ValidationError(
            "archive blocks do not match module parameters",
            problems=[f"missing: {n}" for n in missing]
            + [f"unexpected: {n}" for n in unexpected],
        )
    new_state = {}
    for name, tensor in state.items():
        arr = blocks[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ValidationError(
                f"block {name!r} shape {arr.shape} does not match "
                f"parameter shape {tuple(tensor.shape)}"
            )
        new_state[name] = torch.from_numpy(arr).to(tensor.dtype)
    module.load_state_dict(new_state)
