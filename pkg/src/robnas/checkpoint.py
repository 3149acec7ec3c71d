"""Deterministic checkpoint files: header JSON plus raw array payload.

Layout:  magic line, 8-byte big-endian header length, canonical JSON header
(format version, config, epoch, rng state, array manifest), then the array
bytes concatenated in manifest order. Identical state always serializes to
identical bytes, so save -> load -> save round-trips exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .blocks import Block

CHECKPOINT_VERSION = 1
_MAGIC = b"robnas-checkpoint\n"


class CheckpointError(Exception):
    """Raised for unreadable, corrupted, or version-mismatched checkpoints."""


@dataclass
class Checkpoint:
    epoch: int
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def config_hash(self) -> str:
        return config_digest(self.config)


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def network_state(block: Block) -> dict[str, np.ndarray]:
    """All named parameters and buffers of a network, by dotted name."""
    state = {f"param.{name}": p.data for name, p in block.named_parameters()}
    state.update(
        {f"buffer.{name}": b for name, b in block.named_buffers()})
    return state


def load_network_state(block: Block, arrays: dict[str, np.ndarray]) -> None:
    """Install saved parameters (as replacement tensors) and buffer contents."""
    updates = {}
    for name, p in block.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        saved = arrays[key]
        if saved.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {p.data.shape}, checkpoint "
                f"has {saved.shape}")
        updates[name] = Tensor(saved.astype(p.data.dtype, copy=True),
                               grad_required=True, name=p.name)
    for name, b in block.named_buffers():
        key = f"buffer.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks buffer {name!r}")
        saved = arrays[key]
        if saved.shape != b.shape:
            raise CheckpointError(
                f"buffer {name!r} has shape {b.shape}, checkpoint has "
                f"{saved.shape}")
        b[...] = saved
    block.replace_parameters(updates)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.arrays)
    manifest = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name])
        manifest.append({"name": name, "dtype": str(arr.dtype),
                         "shape": list(arr.shape)})
    header = {
        "version": ckpt.version,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash(),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(len(blob).to_bytes(8, "big"))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(ckpt.arrays[name]).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {e}") from e
    if not raw.startswith(_MAGIC):
        raise CheckpointError(f"{path!r} is not a checkpoint file")
    pos = len(_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path!r}: truncated header length")
    blob_len = int.from_bytes(raw[pos:pos + 8], "big")
    pos += 8
    if len(raw) < pos + blob_len:
        raise CheckpointError(f"{path!r}: truncated header")
    try:
        header = json.loads(raw[pos:pos + blob_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path!r}: corrupted header ({e})") from e
    pos += blob_len
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported "
            f"(this build reads version {CHECKPOINT_VERSION})")
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(dtype.itemsize * int(np.prod(shape, dtype=np.int64)))
        if len(raw) < pos + nbytes:
            raise CheckpointError(
                f"{path!r}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path!r}: {len(raw) - pos} trailing bytes")
    ckpt = Checkpoint(
        epoch=int(header["epoch"]),
        arrays=arrays,
        config=header.get("config", {}),
        rng_state=header.get("rng_state"),
        meta=header.get("meta", {}),
        version=version,
    )
    if header.get("config_hash") != ckpt.config_hash():
        raise CheckpointError(f"{path!r}: config hash mismatch")
    return ckpt


def rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def rng_from_json(state: dict) -> np.random.Generator:
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)
