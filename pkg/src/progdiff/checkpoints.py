"""Checkpoint archives and parameter hashing.

Checkpoints are torch archives containing state dicts plus a metadata
record (config dict, config hash, parameter hash). Consumers verify
hashes and refuse silent mismatches.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn


class CheckpointError(RuntimeError):
    """Checkpoint content inconsistent with expectations."""


def config_hash(config: Mapping[str, Any]) -> str:
    """Hash of the canonical JSON serialization of a config mapping."""
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def params_hash(module: nn.Module) -> str:
    """Content hash over all parameters and buffers, in sorted key order."""
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        arr = state[key].detach().cpu().numpy()
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, kind: str, payload: dict) -> None:
    payload = dict(payload)
    payload["kind"] = kind
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != kind:
        raise CheckpointError(
            f"{path}: expected checkpoint kind {kind!r}, got {payload.get('kind')!r}"
        )
    return payload
