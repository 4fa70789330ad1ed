"""Trainable control branch conditioning generation on a subject's
source latent.

The branch is a copy of the trained UNet encoder/bottleneck coupled back
into the frozen UNet through zero-initialized 1x1x1 projections. With the
couplings at zero the unified network is bitwise identical to the plain
denoiser; training updates only the branch while the denoiser parameters
stay frozen (verified by content hash).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autoencoder import AutoencoderParams, TrainingError
from .checkpoints import (
    CheckpointError,
    config_hash,
    load_checkpoint,
    params_hash,
    save_checkpoint,
)
from .covariates import ContextVector, Covariates, NormalizationSpec, encode_covariates
from .denoiser import DenoiserParams, LatentRow, batched_eps_loss, build_latent_rows
from .networks import ControlBranch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControlNetConfig:
    steps: int = 4000
    batch_size: int = 16
    lr: float = 2e-4
    seed: int = 0
    val_interval: int = 250
    patience: int = 6

    def to_dict(self) -> dict:
        return self.__dict__.copy()

    @staticmethod
    def from_dict(d: dict) -> "ControlNetConfig":
        return ControlNetConfig(**d)


@dataclass(frozen=True)
class VisitPair:
    """Same-subject latents at ages A < B with the target covariates."""

    subject: str
    z_a: torch.Tensor
    age_a: float
    cov_a: Covariates
    z_b: torch.Tensor
    age_b: float
    cov_b: Covariates

    def __post_init__(self):
        if not self.age_a < self.age_b:
            raise ValueError(
                f"visit pair for {self.subject} must have A < B, "
                f"got A={self.age_a}, B={self.age_b}"
            )


@dataclass
class ControlNetParams:
    branch: ControlBranch
    config: ControlNetConfig
    theta_hash: str  # content hash of the frozen denoiser it was built from
    trained: bool = False
    history: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())

    def hash(self) -> str:
        return params_hash(self.branch)


def init_controlnet(theta: DenoiserParams, config: ControlNetConfig) -> ControlNetParams:
    branch = ControlBranch.from_unet(theta.unet)
    return ControlNetParams(branch=branch, config=config, theta_hash=theta.hash())


def controlled_denoise(
    z_t: torch.Tensor,
    t: int,
    ctx: ContextVector,
    z_source: torch.Tensor,
    theta: DenoiserParams,
    phi: ControlNetParams,
) -> torch.Tensor:
    """Unified noise prediction eps(z_t, t, c, z_source)."""
    if phi.theta_hash != theta.hash():
        raise CheckpointError(
            "control branch was built against a different denoiser "
            f"(expected theta hash {phi.theta_hash[:12]}..., "
            f"got {theta.hash()[:12]}...)"
        )
    theta.unet.eval()
    phi.branch.eval()
    with torch.no_grad():
        t_tensor = torch.tensor([float(t)])
        control = phi.branch(z_t[None], t_tensor, ctx.data[None], z_source[None])
        out = theta.unet(z_t[None], t_tensor, ctx.data[None], control=control)
    return out[0]


def build_visit_pairs(
    manifest, split: str, autoencoder: AutoencoderParams
) -> list[VisitPair]:
    """All ordered within-subject visit pairs (A < B) of a split."""
    rows = build_latent_rows(manifest, split, autoencoder)
    by_subject: dict[str, list[LatentRow]] = {}
    for r in rows:
        by_subject.setdefault(r.subject, []).append(r)
    pairs: list[VisitPair] = []
    for subject, visits in by_subject.items():
        visits = sorted(visits, key=lambda r: r.age)
        for i in range(len(visits)):
            for j in range(i + 1, len(visits)):
                if visits[j].age <= visits[i].age:
                    log.warning("skipping non-increasing pair for %s", subject)
                    continue
                pairs.append(
                    VisitPair(
                        subject=subject,
                        z_a=visits[i].latent,
                        age_a=visits[i].age,
                        cov_a=visits[i].covariates,
                        z_b=visits[j].latent,
                        age_b=visits[j].age,
                        cov_b=visits[j].covariates,
                    )
                )
    return pairs


def train_controlnet(
    pairs: list[VisitPair],
    theta: DenoiserParams,
    config: ControlNetConfig,
    val_pairs: list[VisitPair] | None = None,
) -> ControlNetParams:
    """Per iteration: sample t ~ U[1, T], forward-diffuse z_B to z_t,
    predict noise from (z_t, t, c_B, z_A), minimize the noise MSE. Only
    the branch is updated; theta is frozen and hash-checked."""
    if not pairs:
        raise TrainingError("no visit pairs to train on")
    params = init_controlnet(theta, config)
    if config.steps == 0:
        params.history = {"note": "untrained (0 steps)"}
        return params

    theta_hash_before = theta.hash()
    for p in theta.unet.parameters():
        p.requires_grad_(False)
    theta.unet.eval()

    sched = theta.schedule()
    norm = theta.norm
    z_b = torch.stack([p.z_b for p in pairs])
    z_a = torch.stack([p.z_a for p in pairs])
    tokens = torch.stack([encode_covariates(p.cov_b, norm).data for p in pairs])
    if val_pairs:
        vz_b = torch.stack([p.z_b for p in val_pairs])
        vz_a = torch.stack([p.z_a for p in val_pairs])
        vtok = torch.stack([encode_covariates(p.cov_b, norm).data for p in val_pairs])
    else:
        vz_b, vz_a, vtok = z_b[:8], z_a[:8], tokens[:8]

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 2)
    opt = torch.optim.Adam(params.branch.parameters(), lr=config.lr)

    def unified_loss(zb, za, tok, t, eps):
        a_bar = sched.alpha_bars.to(zb.dtype)[t - 1][:, None, None, None, None]
        z_t = torch.sqrt(a_bar) * zb + torch.sqrt(1.0 - a_bar) * eps
        ctrl = params.branch(z_t, t.to(zb.dtype), tok, za)
        eps_hat = theta.unet(z_t, t.to(zb.dtype), tok, control=ctrl)
        return ((eps - eps_hat) ** 2).mean()

    def val_loss(use_control: bool = True) -> float:
        params.branch.eval()
        vgen = torch.Generator().manual_seed(4321)
        with torch.no_grad():
            losses = []
            for i in range(0, len(vz_b), 16):
                zb, za, tok = vz_b[i : i + 16], vz_a[i : i + 16], vtok[i : i + 16]
                t = torch.randint(1, theta.config.T + 1, (len(zb),), generator=vgen)
                eps = torch.randn(zb.shape, generator=vgen)
                a_bar = sched.alpha_bars.to(zb.dtype)[t - 1][:, None, None, None, None]
                z_t = torch.sqrt(a_bar) * zb + torch.sqrt(1.0 - a_bar) * eps
                ctrl = params.branch(z_t, t.to(zb.dtype), tok, za) if use_control else None
                eps_hat = theta.unet(z_t, t.to(zb.dtype), tok, control=ctrl)
                losses.append(float(((eps - eps_hat) ** 2).mean()))
        params.branch.train()
        return float(np.mean(losses))

    zero_coupling_val = val_loss(use_control=False)
    history = {
        "val": [], "steps": [], "train": [],
        "zero_coupling_val": zero_coupling_val,
    }
    best_val = float("inf")
    best_state = None
    bad = 0

    params.branch.train()
    n = len(pairs)
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        t = torch.randint(1, theta.config.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(z_b[idx].shape, generator=gen)
        loss = unified_loss(z_b[idx], z_a[idx], tokens[idx], t, eps)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.val_interval == 0 or step == config.steps:
            v = val_loss()
            history["val"].append(v)
            history["steps"].append(step)
            history["train"].append(loss.item())
            log.info("ControlNet step %d: train %.4f val %.4f", step, history["train"][-1], v)
            if v < best_val - 1e-5:
                best_val = v
                best_state = {k: p.clone() for k, p in params.branch.state_dict().items()}
                bad = 0
            else:
                bad += 1
                if bad >= config.patience:
                    log.info("ControlNet early stopping at step %d", step)
                    break

    if best_state is not None:
        params.branch.load_state_dict(best_state)
    params.branch.eval()
    if theta.hash() != theta_hash_before:
        raise RuntimeError("frozen denoiser parameters were mutated during training")
    params.trained = True
    params.history = history
    return params


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_controlnet(params: ControlNetParams, path: str | Path) -> None:
    save_checkpoint(
        path,
        "controlnet",
        {
            "branch": params.branch.state_dict(),
            "unet_config": params.branch.cfg.to_dict(),
            "config": params.config.to_dict(),
            "config_hash": params.config_hash,
            "theta_hash": params.theta_hash,
            "trained": params.trained,
            "history": params.history,
        },
    )


def load_controlnet(path: str | Path, theta: DenoiserParams) -> ControlNetParams:
    payload = load_checkpoint(path, "controlnet")
    if payload["theta_hash"] != theta.hash():
        raise CheckpointError(
            "controlnet checkpoint references a different denoiser checkpoint"
        )
    branch = ControlBranch(theta.unet.cfg)
    branch.load_state_dict(payload["branch"])
    branch.eval()
    return ControlNetParams(
        branch=branch,
        config=ControlNetConfig.from_dict(payload["config"]),
        theta_hash=payload["theta_hash"],
        trained=bool(payload["trained"]),
        history=payload.get("history", {}),
    )
