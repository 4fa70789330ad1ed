"""Image-space and latent-space grid types plus volume file I/O.

Volumes are stored as raw little-endian float32 arrays in C order with a
JSON sidecar ``<name>.json`` holding {shape, voxel_size_mm, subject, age,
checksum}. The checksum is sha256 over the raw bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GridError(ValueError):
    """Grid shape / range violations."""


@dataclass(frozen=True)
class VolumeGrid:
    """3D scalar intensity field in [0, 1]."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise GridError(f"volume must be 3D, got ndim={self.data.ndim}")
        if min(self.data.shape) < 8:
            raise GridError(f"all volume dims must be >= 8, got {self.data.shape}")
        if any(v <= 0 for v in self.voxel_size_mm):
            raise GridError(f"voxel size must be positive, got {self.voxel_size_mm}")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise GridError(f"intensities must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class LatentGrid:
    """Multi-channel downsampled field z = E(x): (channels, D, H, W)."""

    data: np.ndarray
    downsample_factor: int = 4

    def __post_init__(self):
        if self.data.ndim != 4:
            raise GridError(f"latent must be 4D (C, D, H, W), got ndim={self.data.ndim}")
        if self.downsample_factor < 1:
            raise GridError("downsample_factor must be a positive integer")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def image_shape(self) -> tuple[int, int, int]:
        return tuple(d * self.downsample_factor for d in self.spatial_shape)


def check_divisible(shape: tuple[int, ...], factor: int) -> None:
    if any(d % factor for d in shape):
        raise GridError(
            f"volume dims {shape} must each be divisible by the "
            f"downsample factor {factor}"
        )


def save_volume(
    vol: VolumeGrid, path: str | Path, subject: str = "", age: float = 0.0
) -> dict:
    """Write raw float32 + JSON sidecar; returns the sidecar record."""
    path = Path(path)
    raw = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    path.write_bytes(raw)
    sidecar = {
        "shape": list(vol.data.shape),
        "voxel_size_mm": list(vol.voxel_size_mm),
        "subject": subject,
        "age": age,
        "checksum": hashlib.sha256(raw).hexdigest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True)
    )
    return sidecar


def load_volume(path: str | Path) -> VolumeGrid:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != sidecar["checksum"]:
        raise GridError(f"checksum mismatch for {path}")
    data = np.frombuffer(raw, dtype="<f4").reshape(sidecar["shape"]).astype(np.float32)
    return VolumeGrid(data=data, voxel_size_mm=tuple(sidecar["voxel_size_mm"]))
