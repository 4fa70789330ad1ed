"""Subject-level inference: six-step prediction plus latent averaging.

For one prediction the engine (i) asks the auxiliary model for target-age
region volumes, (ii) assembles the target covariates, (iii) encodes the
source scan, (iv) draws Gaussian noise, (v) runs the reverse diffusion
with the unified controlled denoiser, and (vi) decodes. Stabilized
inference repeats step (iv)-(v) m times with derived seeds and averages
the latents before decoding.

Seed derivation: replicate i of a request with seed s uses s + i, so
m = 1 coincides with the single-inference path. Trajectory target j uses
base seed s + 100003 * j.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .autoencoder import AutoencoderParams, decode_scaled, encode_scaled
from .auxiliary import (
    AuxiliaryError,
    DcmModel,
    LinearAuxModel,
    SubjectWarp,
    VisitRecord,
    fit_subject_warp,
    predict_dcm,
    predict_linear,
)
from .controlnet import ControlNetParams
from .covariates import Covariates, encode_covariates
from .denoiser import DenoiserParams
from .diffusion import sample
from .grids import VolumeGrid

log = logging.getLogger(__name__)

TRAJECTORY_SEED_STRIDE = 100003


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetMetadata:
    age: float
    sex: int
    status: str


@dataclass(frozen=True)
class InferenceRequest:
    source_volume: VolumeGrid
    source_covariates: Covariates
    target: TargetMetadata
    aux_variant: str = "linear"  # linear | dcm | none
    subject_history: tuple[VisitRecord, ...] = ()
    m: int = 4
    seed: int = 0
    num_steps: int = 50  # reverse-diffusion timesteps (strided from T)

    def __post_init__(self):
        if self.target.age <= self.source_covariates.age:
            raise InferenceError(
                f"target age {self.target.age} must exceed source age "
                f"{self.source_covariates.age}"
            )
        if self.m < 1:
            raise InferenceError(f"m must be >= 1, got {self.m}")
        if self.aux_variant not in ("linear", "dcm", "none"):
            raise InferenceError(f"unknown aux variant {self.aux_variant!r}")


@dataclass
class Models:
    autoencoder: AutoencoderParams
    denoiser: DenoiserParams
    controlnet: ControlNetParams
    aux_linear: Optional[LinearAuxModel] = None
    aux_dcm: Optional[DcmModel] = None

    def check_consistent(self) -> None:
        if self.controlnet.theta_hash != self.denoiser.hash():
            raise InferenceError(
                "controlnet was trained against a different denoiser checkpoint"
            )


def predict_target_volumes(
    req: InferenceRequest, models: Models
) -> tuple[dict[str, float], Optional[SubjectWarp]]:
    """Step (i): target-age region volumes from the selected auxiliary
    variant; 'none' carries the source volumes forward unchanged."""
    if req.aux_variant == "none":
        return dict(req.source_covariates.volumes), None
    if req.aux_variant == "linear":
        if models.aux_linear is None:
            raise InferenceError("linear auxiliary model not loaded")
        return (
            predict_linear(
                models.aux_linear,
                req.source_covariates,
                req.source_covariates.age,
                req.target.age,
            ),
            None,
        )
    if models.aux_dcm is None:
        raise InferenceError("DCM auxiliary model not loaded")
    try:
        warp = fit_subject_warp(models.aux_dcm, list(req.subject_history))
    except AuxiliaryError as exc:
        raise InferenceError(
            f"DCM subject fit failed ({exc}); fall back to aux_variant='linear'"
        ) from exc
    return predict_dcm(models.aux_dcm, warp, req.target.age), warp


def assemble_target_covariates(
    req: InferenceRequest, v_hat: dict[str, float]
) -> Covariates:
    """Step (ii): c_B = <s_B, v_hat_B>."""
    return Covariates(
        age=req.target.age,
        sex=req.target.sex,
        status=req.target.status,
        volumes=v_hat,
    )


def infer_once(
    req: InferenceRequest,
    models: Models,
    seed: int,
    v_hat: Optional[dict[str, float]] = None,
) -> torch.Tensor:
    """One reverse-diffusion run; returns the predicted scaled latent."""
    models.check_consistent()
    if v_hat is None:
        v_hat, _ = predict_target_volumes(req, models)
    cov_b = assemble_target_covariates(req, v_hat)
    ctx = encode_covariates(cov_b, models.denoiser.norm)
    z_source = encode_scaled(req.source_volume, models.autoencoder)
    sched = models.denoiser.schedule()

    theta, phi = models.denoiser, models.controlnet
    ctx_batch = ctx.data[None]
    z_src_batch = z_source[None]

    def denoise_fn(z_t: torch.Tensor, t: int) -> torch.Tensor:
        t_tensor = torch.tensor([float(t)])
        with torch.no_grad():
            control = phi.branch(z_t[None], t_tensor, ctx_batch, z_src_batch)
            return theta.unet(z_t[None], t_tensor, ctx_batch, control=control)[0]

    shape = z_source.shape
    return sample(denoise_fn, shape, sched, rng_seed=seed, num_steps=req.num_steps)


@dataclass
class LasResult:
    volume: VolumeGrid
    latent_mean: torch.Tensor
    latent_std: torch.Tensor
    v_hat: dict[str, float]
    covariates_b: Covariates
    seeds: list[int]
    warp: Optional[SubjectWarp] = None


def infer_las(req: InferenceRequest, models: Models) -> LasResult:
    """Run m replicates with derived seeds, average the latents, decode."""
    v_hat, warp = predict_target_volumes(req, models)
    seeds = [req.seed + i for i in range(req.m)]
    latents = []
    for i, s in enumerate(seeds):
        try:
            latents.append(infer_once(req, models, seed=s, v_hat=v_hat))
        except Exception as exc:
            raise InferenceError(f"replicate {i} (seed {s}) failed: {exc}") from exc
    stack = torch.stack(latents)
    mean = stack.mean(dim=0)
    std = stack.std(dim=0) if req.m > 1 else torch.zeros_like(mean)
    volume = decode_scaled(mean, models.autoencoder)
    return LasResult(
        volume=volume,
        latent_mean=mean,
        latent_std=std,
        v_hat=v_hat,
        covariates_b=assemble_target_covariates(req, v_hat),
        seeds=seeds,
        warp=warp,
    )


def infer_trajectory(
    req: InferenceRequest, target_ages: Sequence[float], models: Models
) -> list[LasResult]:
    """One stabilized inference per target age, always re-anchored on the
    single source scan (never on previous predictions)."""
    ages = list(target_ages)
    if any(b <= a for a, b in zip(ages, ages[1:])):
        raise InferenceError(f"target ages must be strictly increasing, got {ages}")
    if ages[0] <= req.source_covariates.age:
        raise InferenceError("all target ages must exceed the source age")
    results = []
    for j, age in enumerate(ages):
        target = TargetMetadata(age=age, sex=req.target.sex, status=req.target.status)
        sub_req = InferenceRequest(
            source_volume=req.source_volume,
            source_covariates=req.source_covariates,
            target=target,
            aux_variant=req.aux_variant,
            subject_history=req.subject_history,
            m=req.m,
            seed=req.seed + TRAJECTORY_SEED_STRIDE * j,
            num_steps=req.num_steps,
        )
        try:
            results.append(infer_las(sub_req, models))
        except InferenceError as exc:
            raise InferenceError(f"target {j} (age {age}): {exc}") from exc
    return results
