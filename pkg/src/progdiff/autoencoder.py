"""Convolutional 3D autoencoder defining the latent space for diffusion.

Encoder emits mean and log-variance heads (Gaussian latent); a small KL
penalty keeps the latent well-scaled. Reconstruction is trained with L1.
A scale factor chosen so validation latent std is about 1 is persisted
with the parameters and applied symmetrically on the encode-for-diffusion
and decode-after-diffusion paths.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .checkpoints import config_hash, load_checkpoint, params_hash, save_checkpoint
from .grids import GridError, LatentGrid, VolumeGrid, check_divisible, load_volume

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AEConfig:
    image_size: int = 32
    downsample_factor: int = 4
    latent_channels: int = 3
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 2)
    groups: int = 8
    kl_weight: float = 1e-6
    epochs: int = 40
    batch_size: int = 8
    lr: float = 2e-3
    patience: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["channel_mults"] = list(self.channel_mults)
        return d

    @staticmethod
    def from_dict(d: dict) -> "AEConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return AEConfig(**d)


class _ResBlock(nn.Module):
    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, ch), ch)
        self.conv1 = nn.Conv3d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(groups, ch), ch)
        self.conv2 = nn.Conv3d(ch, ch, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class EncoderNet(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        chs = [cfg.base_channels * m for m in cfg.channel_mults]
        layers: list[nn.Module] = [nn.Conv3d(1, chs[0], 3, padding=1)]
        for i, ch in enumerate(chs):
            layers.append(_ResBlock(ch, cfg.groups))
            if i < len(chs) - 1:
                layers.append(nn.Conv3d(ch, chs[i + 1], 4, stride=2, padding=1))
        layers += [
            nn.GroupNorm(min(cfg.groups, chs[-1]), chs[-1]),
            nn.SiLU(),
            nn.Conv3d(chs[-1], 2 * cfg.latent_channels, 3, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.net(x).chunk(2, dim=1)
        return mu, logvar.clamp(-20.0, 10.0)


class DecoderNet(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        chs = [cfg.base_channels * m for m in cfg.channel_mults]
        layers: list[nn.Module] = [nn.Conv3d(cfg.latent_channels, chs[-1], 3, padding=1)]
        for i in reversed(range(len(chs))):
            layers.append(_ResBlock(chs[i], cfg.groups))
            if i > 0:
                layers.append(
                    nn.ConvTranspose3d(chs[i], chs[i - 1], 4, stride=2, padding=1)
                )
        layers += [
            nn.GroupNorm(min(cfg.groups, chs[0]), chs[0]),
            nn.SiLU(),
            nn.Conv3d(chs[0], 1, 3, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z))


@dataclass
class AutoencoderParams:
    encoder: EncoderNet
    decoder: DecoderNet
    config: AEConfig
    scale_factor: float = 1.0
    trained: bool = False
    history: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())

    def hash(self) -> str:
        h = params_hash(self.encoder) + params_hash(self.decoder)
        return h


def init_autoencoder(config: AEConfig) -> AutoencoderParams:
    torch.manual_seed(config.seed)
    return AutoencoderParams(
        encoder=EncoderNet(config), decoder=DecoderNet(config), config=config
    )


# ---------------------------------------------------------------------------
# spec operations
# ---------------------------------------------------------------------------

def encode(
    x: VolumeGrid,
    params: AutoencoderParams,
    mode: str = "mean",
    rng_seed: int = 0,
) -> LatentGrid:
    """z = E(x). mode='mean' is deterministic; 'sample' draws from the
    Gaussian posterior using rng_seed."""
    factor = params.config.downsample_factor
    check_divisible(x.shape, factor)
    with torch.no_grad():
        xt = torch.from_numpy(np.ascontiguousarray(x.data, dtype=np.float32))
        mu, logvar = params.encoder(xt[None, None])
        if mode == "mean":
            z = mu
        elif mode == "sample":
            gen = torch.Generator().manual_seed(int(rng_seed))
            eps = torch.randn(mu.shape, generator=gen)
            z = mu + torch.exp(0.5 * logvar) * eps
        else:
            raise ValueError(f"unknown encode mode {mode!r}")
    return LatentGrid(data=z[0].numpy(), downsample_factor=factor)


def decode(z: LatentGrid, params: AutoencoderParams) -> VolumeGrid:
    """x = D(z); output squashed into [0, 1]."""
    if z.data.shape[0] != params.config.latent_channels:
        raise GridError(
            f"latent has {z.data.shape[0]} channels, "
            f"model expects {params.config.latent_channels}"
        )
    with torch.no_grad():
        zt = torch.from_numpy(np.ascontiguousarray(z.data, dtype=np.float32))
        x = params.decoder(zt[None])
    return VolumeGrid(data=x[0, 0].numpy())


def encode_scaled(x: VolumeGrid, params: AutoencoderParams) -> torch.Tensor:
    """Deterministic mean encoding times the stored scale factor; the
    representation diffusion operates on."""
    z = encode(x, params, mode="mean")
    return torch.from_numpy(z.data) * params.scale_factor


def decode_scaled(z_scaled: torch.Tensor, params: AutoencoderParams) -> VolumeGrid:
    z = LatentGrid(
        data=(z_scaled / params.scale_factor).numpy(),
        downsample_factor=params.config.downsample_factor,
    )
    return decode(z, params)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def load_split_tensors(manifest, split: str) -> torch.Tensor:
    rows = manifest.split(split)
    vols = [load_volume(r.path).data for r in rows]
    return torch.from_numpy(np.stack(vols)[:, None].astype(np.float32))


def train_autoencoder(manifest, config: AEConfig) -> AutoencoderParams:
    """Train with L1 reconstruction + small KL; early stopping on the
    validation split; returns params with loss curves attached."""
    params = init_autoencoder(config)
    if config.epochs == 0:
        params.history = {"train": [], "val": [], "note": "untrained (0 epochs)"}
        return params

    train_x = load_split_tensors(manifest, "train")
    val_x = load_split_tensors(manifest, "val")
    if len(train_x) == 0:
        raise TrainingError("training split is empty")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(
        list(params.encoder.parameters()) + list(params.decoder.parameters()),
        lr=config.lr,
    )
    best_val = float("inf")
    best_state = None
    bad_epochs = 0
    history = {"train": [], "val": []}

    for epoch in range(config.epochs):
        params.encoder.train()
        params.decoder.train()
        perm = torch.randperm(len(train_x), generator=gen)
        losses = []
        for i in range(0, len(perm), config.batch_size):
            batch = train_x[perm[i : i + config.batch_size]]
            mu, logvar = params.encoder(batch)
            eps = torch.randn(mu.shape, generator=gen)
            z = mu + torch.exp(0.5 * logvar) * eps
            recon = params.decoder(z)
            l1 = (recon - batch).abs().mean()
            kl = 0.5 * (mu**2 + logvar.exp() - logvar - 1.0).mean()
            loss = l1 + config.kl_weight * kl
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(l1.item())
        val_l1 = _val_l1(params, val_x)
        history["train"].append(float(np.mean(losses)))
        history["val"].append(val_l1)
        log.info("AE epoch %d: train L1 %.4f, val L1 %.4f", epoch, history["train"][-1], val_l1)
        if val_l1 < best_val - 1e-6:
            best_val = val_l1
            best_state = {
                "encoder": {k: v.clone() for k, v in params.encoder.state_dict().items()},
                "decoder": {k: v.clone() for k, v in params.decoder.state_dict().items()},
            }
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                log.info("AE early stopping at epoch %d", epoch)
                break

    if best_state is not None:
        params.encoder.load_state_dict(best_state["encoder"])
        params.decoder.load_state_dict(best_state["decoder"])

    # latent scale factor from validation statistics (std approx 1 after scaling)
    params.encoder.eval()
    params.decoder.eval()
    with torch.no_grad():
        mu, _ = params.encoder(val_x)
    latent_std = float(mu.std())
    params.scale_factor = 1.0 / latent_std if latent_std > 0 else 1.0
    params.trained = True
    history["latent_std"] = latent_std
    history["latent_mean"] = float(mu.mean())
    history["per_channel_mean"] = mu.mean(dim=(0, 2, 3, 4)).tolist()
    history["per_channel_std"] = mu.std(dim=(0, 2, 3, 4)).tolist()
    params.history = history
    return params


def _val_l1(params: AutoencoderParams, val_x: torch.Tensor) -> float:
    params.encoder.eval()
    params.decoder.eval()
    with torch.no_grad():
        losses = []
        for i in range(0, len(val_x), 16):
            batch = val_x[i : i + 16]
            mu, _ = params.encoder(batch)
            recon = params.decoder(mu)
            losses.append(float((recon - batch).abs().mean()))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_autoencoder(params: AutoencoderParams, path: str | Path) -> None:
    save_checkpoint(
        path,
        "autoencoder",
        {
            "encoder": params.encoder.state_dict(),
            "decoder": params.decoder.state_dict(),
            "config": params.config.to_dict(),
            "config_hash": params.config_hash,
            "scale_factor": params.scale_factor,
            "trained": params.trained,
            "history": params.history,
        },
    )


def load_autoencoder(path: str | Path) -> AutoencoderParams:
    payload = load_checkpoint(path, "autoencoder")
    config = AEConfig.from_dict(payload["config"])
    params = init_autoencoder(config)
    params.encoder.load_state_dict(payload["encoder"])
    params.decoder.load_state_dict(payload["decoder"])
    params.scale_factor = float(payload["scale_factor"])
    params.trained = bool(payload["trained"])
    params.history = payload.get("history", {})
    params.encoder.eval()
    params.decoder.eval()
    return params
