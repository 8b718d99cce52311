"""Versioned binary checkpoints for training state.

Layout: ``b"RNSC"``, little-endian uint32 version, uint64 header length, a
UTF-8 JSON header, then the raw tensor blocks back to back. The header echoes
the training config and lists every named block with dtype, shape and offset,
alongside the rng state, iteration counter and loss history.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .trainer import TrainConfig, TrainState, build_modules

MAGIC = b"RNSC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int = VERSION):
        super().__init__(f"checkpoint version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


def _modules(state: TrainState) -> dict:
    return {"field_coarse": state.params.coarse, "field_fine": state.params.fine,
            "predictor": state.predictor, "embedding": state.embedding}


def _optimizers(state: TrainState) -> dict:
    return {"opt_field": state.opt_field, "opt_predictor": state.opt_predictor}


def state_blocks(state: TrainState) -> tuple[dict[str, torch.Tensor], dict]:
    blocks, meta = {}, {}
    for name, module in _modules(state).items():
        for key, tensor in module.state_dict().items():
            blocks[f"{name}/{key}"] = tensor
    for name, opt in _optimizers(state).items():
        sd = opt.state_dict()
        meta[name] = sd["param_groups"]
        for idx, slots in sd["state"].items():
            for key, tensor in slots.items():
                blocks[f"{name}/state/{idx}/{key}"] = torch.as_tensor(tensor)
    if state.residual_cache is not None:
        blocks["residual_cache"] = state.residual_cache
    return blocks, meta


def to_bytes(state: TrainState) -> bytes:
    blocks, opt_meta = state_blocks(state)
    index, payload, offset = [], [], 0
    for name, tensor in blocks.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "config": state.config.to_dict(),
        "iter": state.iter,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
        "optimizers": opt_meta,
        "near_far": list(state.cache.get("near_far", (2.0, 6.0))),
        "blocks": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(payload)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Atomic write (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(state))
    os.replace(tmp, path)


def from_bytes(data: bytes) -> TrainState:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointVersionError(version)
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc
    body = memoryview(data)[start + head_len:]

    blocks = {}
    for entry in header["blocks"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(body):
            raise CheckpointError(f"block {entry['name']} runs past the end of the file")
        arr = np.frombuffer(body[lo:hi], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        blocks[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())

    vectors = blocks["embedding/camera_vectors"]
    params, predictor, embedding, opt_f, opt_p = build_modules(config, vectors)
    state = TrainState(config, params, predictor, embedding, opt_f, opt_p, np.random.default_rng())
    for name, module in _modules(state).items():
        prefix = name + "/"
        module.load_state_dict({k[len(prefix):]: v for k, v in blocks.items() if k.startswith(prefix)})
    for name, opt in _optimizers(state).items():
        slots: dict[int, dict] = {}
        prefix = name + "/state/"
        for key, tensor in blocks.items():
            if key.startswith(prefix):
                idx, slot = key[len(prefix):].split("/")
                slots.setdefault(int(idx), {})[slot] = tensor
        opt.load_state_dict({"state": slots, "param_groups": header["optimizers"][name]})
    state.rng.bit_generator.state = header["rng"]
    state.iter = header["iter"]
    state.history = header["history"]
    state.residual_cache = blocks.get("residual_cache")
    state.cache["near_far"] = tuple(header["near_far"])
    return state


def load_checkpoint(path: str | Path) -> TrainState:
    return from_bytes(Path(path).read_bytes())
