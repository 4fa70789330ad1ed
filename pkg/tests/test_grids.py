"""Grid invariants, volume file round-trips, and checkpoint hashing."""

import numpy as np
import pytest
import torch
from torch import nn

from progdiff.checkpoints import (
    CheckpointError,
    config_hash,
    load_checkpoint,
    params_hash,
    save_checkpoint,
)
from progdiff.grids import (
    GridError,
    LatentGrid,
    VolumeGrid,
    check_divisible,
    load_volume,
    save_volume,
)


def rand_volume(seed=0, n=16) -> VolumeGrid:
    rng = np.random.default_rng(seed)
    return VolumeGrid(rng.random((n, n, n), dtype=np.float32))


class TestVolumeGrid:
    def test_valid(self):
        v = rand_volume()
        assert v.shape == (16, 16, 16)

    @pytest.mark.parametrize(
        "data",
        [
            np.zeros((16, 16), dtype=np.float32),
            np.zeros((4, 16, 16), dtype=np.float32),
            np.full((16, 16, 16), 1.5, dtype=np.float32),
            np.full((16, 16, 16), -0.1, dtype=np.float32),
        ],
    )
    def test_invalid_rejected(self, data):
        with pytest.raises(GridError):
            VolumeGrid(data)

    def test_voxel_size_positive(self):
        with pytest.raises(GridError):
            VolumeGrid(np.zeros((16,) * 3, dtype=np.float32), (1.0, 0.0, 1.0))


class TestLatentGrid:
    def test_shapes(self):
        z = LatentGrid(np.zeros((3, 8, 8, 8)), downsample_factor=4)
        assert z.spatial_shape == (8, 8, 8)
        assert z.image_shape() == (32, 32, 32)

    def test_invalid(self):
        with pytest.raises(GridError):
            LatentGrid(np.zeros((8, 8, 8)))
        with pytest.raises(GridError):
            LatentGrid(np.zeros((3, 8, 8, 8)), downsample_factor=0)

    def test_check_divisible(self):
        check_divisible((32, 32, 32), 4)
        with pytest.raises(GridError):
            check_divisible((30, 32, 32), 4)


class TestVolumeIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        v = rand_volume(3)
        sidecar = save_volume(v, tmp_path / "x.f32", subject="S1", age=71.5)
        loaded = load_volume(tmp_path / "x.f32")
        assert np.array_equal(loaded.data, v.data)
        assert sidecar["subject"] == "S1"
        assert sidecar["age"] == 71.5

    def test_corruption_detected(self, tmp_path):
        save_volume(rand_volume(4), tmp_path / "x.f32")
        raw = bytearray((tmp_path / "x.f32").read_bytes())
        raw[100] ^= 0xFF
        (tmp_path / "x.f32").write_bytes(bytes(raw))
        with pytest.raises(GridError, match="checksum"):
            load_volume(tmp_path / "x.f32")

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "x.f32").write_bytes(b"\x00" * 64)
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "x.f32")


class TestCheckpoints:
    def test_config_hash_canonical(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})

    def test_params_hash_tracks_content(self):
        torch.manual_seed(0)
        m = nn.Linear(4, 4)
        h0 = params_hash(m)
        assert params_hash(m) == h0
        with torch.no_grad():
            m.weight += 1.0
        assert params_hash(m) != h0

    def test_save_load_kind_checked(self, tmp_path):
        save_checkpoint(tmp_path / "c.pt", "autoencoder", {"x": 1})
        assert load_checkpoint(tmp_path / "c.pt", "autoencoder")["x"] == 1
        with pytest.raises(CheckpointError, match="kind"):
            load_checkpoint(tmp_path / "c.pt", "denoiser")

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.pt", "autoencoder")

    def test_save_creates_parent_dirs(self, tmp_path):
        save_checkpoint(tmp_path / "deep" / "dir" / "c.pt", "denoiser", {})
        assert (tmp_path / "deep" / "dir" / "c.pt").exists()
