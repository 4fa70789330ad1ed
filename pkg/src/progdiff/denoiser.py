"""Conditional UNet noise predictor and latent-diffusion training.

The model estimates the noise eps(z_t, t, c) needed to reverse a
diffusion step, with covariates entering via cross-attention. Training
samples t uniformly, forward-diffuses the scaled latent, and descends on
the mean-squared noise-prediction objective, with early stopping on the
validation split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autoencoder import AutoencoderParams, TrainingError, encode_scaled
from .checkpoints import config_hash, load_checkpoint, params_hash, save_checkpoint
from .covariates import (
    ContextVector,
    Covariates,
    CovariateError,
    NormalizationSpec,
    encode_covariates,
)
from .diffusion import NoiseSchedule, make_schedule
from .grids import load_volume
from .networks import UNet3d, UNetConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LDMConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    T: int = 1000
    schedule_kind: str = "scaled_linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 4000
    batch_size: int = 16
    lr: float = 2e-4
    seed: int = 0
    val_interval: int = 250
    patience: int = 6

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["unet"] = self.unet.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "LDMConfig":
        d = dict(d)
        d["unet"] = UNetConfig.from_dict(d["unet"])
        return LDMConfig(**d)


@dataclass
class DenoiserParams:
    unet: UNet3d
    config: LDMConfig
    norm: NormalizationSpec
    trained: bool = False
    history: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())

    def hash(self) -> str:
        return params_hash(self.unet)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(
            self.config.schedule_kind,
            self.config.T,
            self.config.beta_start,
            self.config.beta_end,
        )


def init_denoiser(config: LDMConfig, norm: NormalizationSpec) -> DenoiserParams:
    torch.manual_seed(config.seed)
    return DenoiserParams(unet=UNet3d(config.unet), config=config, norm=norm)


def denoise(
    z_t: torch.Tensor, t: int, ctx: ContextVector, params: DenoiserParams
) -> torch.Tensor:
    """Predicted noise for a single latent (C, D, H, W); deterministic."""
    if not 1 <= t <= params.config.T:
        raise IndexError(f"timestep {t} outside [1, {params.config.T}]")
    params.unet.eval()
    with torch.no_grad():
        out = params.unet(
            z_t[None],
            torch.tensor([t], dtype=torch.float32),
            ctx.data[None],
        )
    return out[0]


# ---------------------------------------------------------------------------
# training data assembly
# ---------------------------------------------------------------------------

@dataclass
class LatentRow:
    subject: str
    age: float
    latent: torch.Tensor  # scaled latent (C, D, H, W)
    covariates: Covariates


def build_latent_rows(
    manifest, split: str, autoencoder: AutoencoderParams
) -> list[LatentRow]:
    """Encode every volume of a split; rows with invalid covariates are
    rejected with their identifier."""
    rows: list[LatentRow] = []
    for r in manifest.split(split):
        try:
            cov = r.covariates()
        except (CovariateError, KeyError) as exc:
            log.warning("rejecting row %s@%.2f: %s", r.subject, r.age, exc)
            continue
        z = encode_scaled(load_volume(r.path), autoencoder)
        rows.append(LatentRow(subject=r.subject, age=r.age, latent=z, covariates=cov))
    return rows


def _stack_tokens(rows: list[LatentRow], norm: NormalizationSpec) -> torch.Tensor:
    return torch.stack([encode_covariates(r.covariates, norm).data for r in rows])


def batched_eps_loss(
    unet: UNet3d,
    latents: torch.Tensor,
    tokens: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    control: tuple | None = None,
) -> torch.Tensor:
    """Forward-diffuse a batch to per-element timesteps and return the
    noise-prediction MSE."""
    a_bar = sched.alpha_bars.to(latents.dtype)[t - 1][:, None, None, None, None]
    z_t = torch.sqrt(a_bar) * latents + torch.sqrt(1.0 - a_bar) * eps
    eps_hat = unet(z_t, t.to(latents.dtype), tokens, control=control)
    return ((eps - eps_hat) ** 2).mean()


def train_ldm(
    manifest, autoencoder: AutoencoderParams, config: LDMConfig
) -> DenoiserParams:
    train_rows = build_latent_rows(manifest, "train", autoencoder)
    if not train_rows:
        raise TrainingError("no usable training rows")
    norm = NormalizationSpec.from_covariates([r.covariates for r in train_rows])
    params = init_denoiser(config, norm)
    if config.steps == 0:
        params.history = {"val": [], "note": "untrained (0 steps)"}
        return params

    val_rows = build_latent_rows(manifest, "val", autoencoder)
    sched = params.schedule()
    latents = torch.stack([r.latent for r in train_rows])
    tokens = _stack_tokens(train_rows, norm)
    val_latents = torch.stack([r.latent for r in val_rows]) if val_rows else latents[:4]
    val_tokens = (
        _stack_tokens(val_rows, norm) if val_rows else tokens[:4]
    )

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(params.unet.parameters(), lr=config.lr)

    def val_loss() -> float:
        params.unet.eval()
        vgen = torch.Generator().manual_seed(1234)
        with torch.no_grad():
            losses = []
            for i in range(0, len(val_latents), 16):
                z0 = val_latents[i : i + 16]
                tok = val_tokens[i : i + 16]
                t = torch.randint(1, config.T + 1, (len(z0),), generator=vgen)
                eps = torch.randn(z0.shape, generator=vgen)
                losses.append(float(batched_eps_loss(params.unet, z0, tok, t, eps, sched)))
        params.unet.train()
        return float(np.mean(losses))

    untrained_val = val_loss()
    history = {"val": [], "steps": [], "train": [], "untrained_val": untrained_val}
    best_val = float("inf")
    best_state = None
    bad = 0

    params.unet.train()
    n = len(latents)
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        z0 = latents[idx]
        tok = tokens[idx]
        t = torch.randint(1, config.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        loss = batched_eps_loss(params.unet, z0, tok, t, eps, sched)
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
            log.info("LDM step %d: train %.4f val %.4f", step, history["train"][-1], v)
            if v < best_val - 1e-5:
                best_val = v
                best_state = {k: p.clone() for k, p in params.unet.state_dict().items()}
                bad = 0
            else:
                bad += 1
                if bad >= config.patience:
                    log.info("LDM early stopping at step %d", step)
                    break

    if best_state is not None:
        params.unet.load_state_dict(best_state)
    params.unet.eval()
    params.trained = True
    params.history = history
    return params


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_denoiser(params: DenoiserParams, path: str | Path) -> None:
    save_checkpoint(
        path,
        "denoiser",
        {
            "unet": params.unet.state_dict(),
            "config": params.config.to_dict(),
            "config_hash": params.config_hash,
            "params_hash": params.hash(),
            "norm": params.norm.to_dict(),
            "trained": params.trained,
            "history": params.history,
        },
    )


def load_denoiser(path: str | Path) -> DenoiserParams:
    payload = load_checkpoint(path, "denoiser")
    config = LDMConfig.from_dict(payload["config"])
    norm = NormalizationSpec.from_dict(payload["norm"])
    params = init_denoiser(config, norm)
    params.unet.load_state_dict(payload["unet"])
    params.trained = bool(payload["trained"])
    params.history = payload.get("history", {})
    params.unet.eval()
    return params
