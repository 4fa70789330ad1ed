"""3D network building blocks: the conditional UNet noise predictor and
its trainable control branch.

The UNet runs on latent grids (channels, D, H, W). Covariates enter
through cross-attention at the two lowest resolutions and the bottleneck;
timesteps through sinusoidal embeddings added per residual block.

The control branch mirrors the UNet encoder and bottleneck. Its outputs
re-enter the frozen UNet through zero-initialized 1x1x1 projections added
to the decoder skip paths and the bottleneck, so a freshly initialized
branch leaves the UNet output bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .covariates import NUM_TOKENS


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    attn_levels: tuple[int, ...] = (1, 2)
    ctx_tokens: int = NUM_TOKENS
    ctx_dim: int = 32
    time_dim: int = 64
    groups: int = 8
    num_heads: int = 4

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "attn_levels": list(self.attn_levels),
            "ctx_tokens": self.ctx_tokens,
            "ctx_dim": self.ctx_dim,
            "time_dim": self.time_dim,
            "groups": self.groups,
            "num_heads": self.num_heads,
        }

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        return UNetConfig(
            in_channels=int(d["in_channels"]),
            base_channels=int(d["base_channels"]),
            channel_mults=tuple(d["channel_mults"]),
            attn_levels=tuple(d["attn_levels"]),
            ctx_tokens=int(d["ctx_tokens"]),
            ctx_dim=int(d["ctx_dim"]),
            time_dim=int(d["time_dim"]),
            groups=int(d["groups"]),
            num_heads=int(d["num_heads"]),
        )


class SinusoidalEmbedding(nn.Module):
    """Standard transformer-style sinusoidal timestep embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=t.dtype, device=t.device)
            / max(half - 1, 1)
        )
        args = t[:, None].to(freqs.dtype) * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = (
            nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        )
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(self.act(temb))[:, :, None, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class AttentionPair(nn.Module):
    """Self-attention over voxels followed by cross-attention to the
    covariate context tokens, both with pre-norm residuals."""

    def __init__(self, channels: int, ctx_dim: int, num_heads: int):
        super().__init__()
        heads = num_heads if channels % num_heads == 0 else 1
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(channels)
        self.cross_attn = nn.MultiheadAttention(
            channels, heads, kdim=ctx_dim, vdim=ctx_dim, batch_first=True
        )

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        spatial = x.shape[2:]
        h = x.reshape(b, c, -1).transpose(1, 2)  # (B, N, C)
        q = self.norm_self(h)
        h = h + self.self_attn(q, q, q, need_weights=False)[0]
        q = self.norm_cross(h)
        h = h + self.cross_attn(q, ctx, ctx, need_weights=False)[0]
        return h.transpose(1, 2).reshape(b, c, *spatial)


class TokenProjection(nn.Module):
    """Per-token linear map from scalar covariate tokens (B, tokens, 1)
    to context width (B, tokens, ctx_dim)."""

    def __init__(self, tokens: int, ctx_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(tokens, ctx_dim) * 0.2)
        self.bias = nn.Parameter(torch.zeros(tokens, ctx_dim))

    def forward(self, tok: torch.Tensor) -> torch.Tensor:
        return tok * self.weight[None] + self.bias[None]


class _EncoderCore(nn.Module):
    """Input conv + down path + bottleneck shared by the UNet and its
    control branch (the branch holds a trainable copy)."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        self.time_embed = nn.Sequential(
            SinusoidalEmbedding(cfg.time_dim),
            nn.Linear(cfg.time_dim, cfg.time_dim * 4),
            nn.SiLU(),
            nn.Linear(cfg.time_dim * 4, cfg.time_dim),
        )
        self.ctx_proj = TokenProjection(cfg.ctx_tokens, cfg.ctx_dim)
        self.in_conv = nn.Conv3d(cfg.in_channels, chs[0], 3, padding=1)

        self.enc_res1 = nn.ModuleList()
        self.enc_res2 = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, ch in enumerate(chs):
            self.enc_res1.append(ResBlock3d(ch, ch, cfg.time_dim, cfg.groups))
            self.enc_res2.append(ResBlock3d(ch, ch, cfg.time_dim, cfg.groups))
            self.enc_attn.append(
                AttentionPair(ch, cfg.ctx_dim, cfg.num_heads)
                if i in cfg.attn_levels
                else None
            )
            if i < len(chs) - 1:
                self.downs.append(nn.Conv3d(ch, chs[i + 1], 4, stride=2, padding=1))

        self.mid_res1 = ResBlock3d(chs[-1], chs[-1], cfg.time_dim, cfg.groups)
        self.mid_attn = AttentionPair(chs[-1], cfg.ctx_dim, cfg.num_heads)
        self.mid_res2 = ResBlock3d(chs[-1], chs[-1], cfg.time_dim, cfg.groups)

    def encode(
        self, x: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor,
        extra_in: torch.Tensor | None = None,
    ) -> tuple[list[torch.Tensor], torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (skips, bottleneck, temb, ctx)."""
        temb = self.time_embed(t)
        ctx = self.ctx_proj(tokens)
        h = self.in_conv(x)
        if extra_in is not None:
            h = h + extra_in
        skips: list[torch.Tensor] = []
        for i in range(len(self.cfg.channels)):
            h = self.enc_res1[i](h, temb)
            h = self.enc_res2[i](h, temb)
            if self.enc_attn[i] is not None:
                h = self.enc_attn[i](h, ctx)
            skips.append(h)
            if i < len(self.cfg.channels) - 1:
                h = self.downs[i](h)
        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, ctx)
        h = self.mid_res2(h, temb)
        return skips, h, temb, ctx


class UNet3d(nn.Module):
    """Conditional noise predictor ε(z_t, t, c), optionally accepting
    control residuals from a ControlBranch."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        self.core = _EncoderCore(cfg)

        self.dec_res1 = nn.ModuleList()
        self.dec_res2 = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(chs))):
            # decoder level i consumes upsampled features concat skip_i
            self.ups.append(
                nn.ConvTranspose3d(chs[i + 1], chs[i], 4, stride=2, padding=1)
                if i < len(chs) - 1
                else nn.Identity()
            )
            self.dec_res1.append(ResBlock3d(chs[i] * 2, chs[i], cfg.time_dim, cfg.groups))
            self.dec_res2.append(ResBlock3d(chs[i], chs[i], cfg.time_dim, cfg.groups))
            self.dec_attn.append(
                AttentionPair(chs[i], cfg.ctx_dim, cfg.num_heads)
                if i in cfg.attn_levels
                else None
            )

        self.out_norm = nn.GroupNorm(min(cfg.groups, chs[0]), chs[0])
        self.out_conv = nn.Conv3d(chs[0], cfg.in_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        tokens: torch.Tensor,
        control: tuple[list[torch.Tensor], torch.Tensor] | None = None,
    ) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        skips, h, temb, ctx = self.core.encode(x, t, tokens)
        if control is not None:
            skip_res, mid_res = control
            h = h + mid_res
            skips = [s + r for s, r in zip(skips, skip_res)]
        n_levels = len(self.cfg.channels)
        for j, i in enumerate(reversed(range(n_levels))):
            h = self.ups[j](h)
            h = torch.cat([h, skips[i]], dim=1)
            h = self.dec_res1[j](h, temb)
            h = self.dec_res2[j](h, temb)
            if self.dec_attn[j] is not None:
                h = self.dec_attn[j](h, ctx)
        return self.out_conv(self.act(self.out_norm(h)))


def _zero_conv(ch_in: int, ch_out: int) -> nn.Conv3d:
    conv = nn.Conv3d(ch_in, ch_out, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    """Trainable copy of the UNet encoder/bottleneck plus zero-initialized
    couplings; conditions on the subject's source latent."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        self.core = _EncoderCore(cfg)
        self.source_proj = _zero_conv(cfg.in_channels, chs[0])
        self.skip_couplings = nn.ModuleList(_zero_conv(ch, ch) for ch in chs)
        self.mid_coupling = _zero_conv(chs[-1], chs[-1])

    @classmethod
    def from_unet(cls, unet: UNet3d) -> "ControlBranch":
        branch = cls(unet.cfg)
        branch.core.load_state_dict(unet.core.state_dict())
        return branch

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        tokens: torch.Tensor,
        z_source: torch.Tensor,
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        if z_source.shape[-3:] != x.shape[-3:]:
            raise ValueError(
                f"source latent spatial shape {tuple(z_source.shape[-3:])} "
                f"!= noisy latent spatial shape {tuple(x.shape[-3:])}"
            )
        hint = self.source_proj(z_source)
        skips, mid, _, _ = self.core.encode(x, t, tokens, extra_in=hint)
        skip_res = [c(s) for c, s in zip(self.skip_couplings, skips)]
        return skip_res, self.mid_coupling(mid)

    def couplings_are_zero(self) -> bool:
        mods = list(self.skip_couplings) + [self.mid_coupling, self.source_proj]
        return all(
            not p.abs().any().item() for m in mods for p in m.parameters()
        )
