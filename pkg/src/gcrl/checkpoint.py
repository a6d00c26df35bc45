"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"GCRL"  u16 version
    u32 metadata length, metadata as UTF-8 JSON (config, counters, dtype)
    u32 array count
    per array: u16 name length, name, u8 dtype tag, u8 ndim, u32 dims..., u64 nbytes, raw data
    u32 CRC-32 of everything above

Loading parses and validates the whole file before touching any live state.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict
from typing import Any

import numpy as np

from .agent import CrlAgent
from .config import ExperimentConfig
from .envs import make_spec
from .trainer import TrainState, agent_config_for

MAGIC = b"GCRL"
VERSION = 1

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {dt: tag for tag, dt in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def _encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", _TAG_OF[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_bytes(metadata: dict[str, Any], arrays: dict[str, np.ndarray]) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<H", VERSION) + struct.pack("<I", len(meta)) + meta + _encode_arrays(arrays)
    return body + struct.pack("<I", zlib.crc32(body))


def load_bytes(data: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes: not a GCRL checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<I")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata: {e}") from None
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        dt = _TAGS[tag]
        if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: byte count does not match shape {shape}")
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    if zlib.crc32(data[: r.pos - 4]) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    return metadata, arrays


def checkpoint_save(agent: CrlAgent, state: TrainState, config: ExperimentConfig, path: str) -> None:
    if agent.dtype != np.float32:
        raise CheckpointError("only float32 agents are checkpointed")
    counters = asdict(state)
    counters.pop("last_stats")
    metadata = {
        "config": config.to_dict(),
        "counters": counters,
        "optimizer_steps": agent.optimizer_steps(),
    }
    data = save_bytes(metadata, agent.named_arrays())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)  # never leave a half-written checkpoint at ``path``


def checkpoint_load(path: str, config: ExperimentConfig | None = None) -> tuple[CrlAgent, TrainState, ExperimentConfig]:
    """Rebuild agent, counters and config. ``config`` (if given) fixes the expected shapes."""
    with open(path, "rb") as fh:
        metadata, arrays = load_bytes(fh.read())
    try:
        saved_cfg = ExperimentConfig(**{k: v for k, v in metadata["config"].items()})
        counters = metadata["counters"]
        opt_steps = metadata["optimizer_steps"]
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"incomplete checkpoint metadata: {e}") from None
    cfg = config or saved_cfg
    spec = make_spec(cfg.env_id, **cfg.env_overrides())
    agent = CrlAgent.create(agent_config_for(cfg, spec), np.random.default_rng(0))
    live = agent.named_arrays()
    missing = sorted(set(live) - set(arrays))
    extra = sorted(set(arrays) - set(live))
    if missing or extra:
        raise CheckpointError(f"tensor set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, dst in live.items():
        if arrays[name].shape != dst.shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} does not match expected {dst.shape}")
    for name, dst in live.items():
        np.copyto(dst, arrays[name])
    agent.sa_opt.t = int(opt_steps["sa_encoder"])
    agent.goal_opt.t = int(opt_steps["goal_encoder"])
    agent.actor_opt.t = int(opt_steps["actor"])
    agent.entropy_opt.t = int(opt_steps["log_entropy_coef"])
    state = TrainState(**{k: int(v) for k, v in counters.items()})
    return agent, state, cfg


__all__ = ["CheckpointError", "checkpoint_save", "checkpoint_load", "save_bytes", "load_bytes", "MAGIC", "VERSION"]
