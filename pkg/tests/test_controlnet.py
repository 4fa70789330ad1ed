"""Control-branch training: visit-pair assembly, the frozen-denoiser
guarantee, and checkpoint compatibility checks."""

import pytest
import torch

from progdiff.checkpoints import CheckpointError
from progdiff.controlnet import (
    ControlNetConfig,
    VisitPair,
    build_visit_pairs,
    controlled_denoise,
    init_controlnet,
    load_controlnet,
    save_controlnet,
    train_controlnet,
)
from progdiff.denoiser import LDMConfig, init_denoiser


@pytest.fixture(scope="module")
def pairs(tiny_dataset, tiny_ae):
    _, manifest = tiny_dataset
    return build_visit_pairs(manifest, "train", tiny_ae)


@pytest.fixture(scope="module")
def trained(pairs, stub_models):
    cfg = ControlNetConfig(steps=40, batch_size=8, val_interval=20, patience=4)
    return train_controlnet(pairs[:32], stub_models.denoiser, cfg)


class TestVisitPairs:
    def test_pair_count_is_n_choose_2(self, tiny_dataset, pairs):
        _, manifest = tiny_dataset
        want = 0
        for sid in manifest.subjects("train"):
            n = len(manifest.subject_rows(sid))
            want += n * (n - 1) // 2
        assert len(pairs) == want

    def test_pairs_ordered_in_age(self, pairs):
        for p in pairs:
            assert p.age_a < p.age_b
            assert p.z_a.shape == p.z_b.shape == (3, 8, 8, 8)

    def test_backwards_pair_rejected(self, pairs):
        p = pairs[0]
        with pytest.raises(ValueError, match="A < B"):
            VisitPair(
                subject=p.subject, z_a=p.z_a, age_a=p.age_b, cov_a=p.cov_a,
                z_b=p.z_b, age_b=p.age_a, cov_b=p.cov_b,
            )


class TestTraining:
    def test_init_binds_to_denoiser(self, stub_models):
        phi = init_controlnet(stub_models.denoiser, ControlNetConfig())
        assert phi.theta_hash == stub_models.denoiser.hash()
        assert phi.branch.couplings_are_zero()

    def test_denoiser_stays_frozen(self, stub_models, trained):
        """The denoiser content hash must survive branch training, and
        the trained couplings must have left zero."""
        assert stub_models.denoiser.hash() == trained.theta_hash
        assert not trained.branch.couplings_are_zero()
        assert trained.trained

    def test_zero_coupling_baseline_recorded(self, trained):
        assert trained.history["zero_coupling_val"] > 0.0
        assert len(trained.history["val"]) >= 1

    def test_unified_forward_checks_theta(self, stub_models):
        other = init_denoiser(LDMConfig(seed=99), stub_models.denoiser.norm)
        phi = init_controlnet(stub_models.denoiser, ControlNetConfig())
        z = torch.randn(3, 8, 8, 8)
        from test_denoiser import encode_covariates_any

        ctx = encode_covariates_any(stub_models.denoiser)
        with pytest.raises(CheckpointError, match="different denoiser"):
            controlled_denoise(z, 10, ctx, z, other, phi)

    def test_roundtrip_and_wrong_theta(self, trained, stub_models, tmp_path):
        save_controlnet(trained, tmp_path / "cn.pt")
        loaded = load_controlnet(tmp_path / "cn.pt", stub_models.denoiser)
        assert loaded.hash() == trained.hash()
        other = init_denoiser(LDMConfig(seed=99), stub_models.denoiser.norm)
        with pytest.raises(CheckpointError, match="different denoiser"):
            load_controlnet(tmp_path / "cn.pt", other)
