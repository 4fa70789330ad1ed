"""Shared fixtures.

`tiny_*` fixtures build a minimal 20-subject dataset and cheap model
stacks for plumbing-level tests. `pipeline` loads (or builds, on first
run) the properly trained stack cached under tests/.cache; see
_pipeline.py for the budget.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from progdiff.autoencoder import AEConfig, train_autoencoder
from progdiff.auxiliary import VisitRecord, fit_linear
from progdiff.controlnet import ControlNetConfig, init_controlnet
from progdiff.denoiser import LDMConfig, train_ldm
from progdiff.inference import Models
from progdiff.phantom import PhantomSpec, make_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    spec = PhantomSpec()
    out = tmp_path_factory.mktemp("tiny-data")
    manifest = make_dataset(spec, 20, seed=5, out_dir=out)
    return spec, manifest


@pytest.fixture(scope="session")
def tiny_ae(tiny_dataset):
    _, manifest = tiny_dataset
    return train_autoencoder(manifest, AEConfig(epochs=2, patience=2, seed=0))


@pytest.fixture(scope="session")
def stub_models(tiny_dataset, tiny_ae):
    """Consistent but untrained denoiser/control stack: exercises every
    inference code path at real shapes without training cost."""
    _, manifest = tiny_dataset
    ldm = train_ldm(manifest, tiny_ae, LDMConfig(steps=0))
    cn = init_controlnet(ldm, ControlNetConfig(steps=0))
    records = [
        VisitRecord(subject=r.subject, age=r.age, covariates=r.covariates())
        for r in manifest.split("train")
    ]
    return Models(
        autoencoder=tiny_ae, denoiser=ldm, controlnet=cn,
        aux_linear=fit_linear(records),
    )


@pytest.fixture(scope="session")
def pipeline():
    from _pipeline import get_pipeline

    return get_pipeline()
