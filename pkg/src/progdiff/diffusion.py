"""Core DDPM mathematics, independent of any network.

Implements the standard Gaussian diffusion machinery:

- forward marginal      q(z_t | z_0) = N(√ᾱ_t z_0, (1-ᾱ_t) I)
- reverse posterior     q(z_{t-1} | z_t, z_0) = N(μ̃(z_0, z_t), β̃_t I)
- ε-parameterized step  ẑ_0 = (z_t - √(1-ᾱ_t) ε̂) / √ᾱ_t
- sampling loop         z_T ~ N(0, I), then t = T, ..., 1

Timesteps are 1-based (t ∈ {1..T}) with the convention ᾱ_0 = 1, so the
t = 1 posterior is well defined. Schedule tables are kept in float64 and
cast to the dtype of the tensors they are combined with.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "forward_diffuse",
    "posterior_params",
    "predict_clean",
    "ddpm_step",
    "ddpm_step_between",
    "diffusion_loss",
    "strided_timesteps",
    "sample",
    "DEFAULT_CLAMP",
]

# Default clamp range for the reconstructed clean latent ẑ_0, in latent
# units (latents are scaled to roughly unit std before diffusion).
DEFAULT_CLAMP = (-4.0, 4.0)


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule tables for a T-step diffusion chain.

    All arrays are float64 tensors of length T, indexed by ``t - 1`` for
    t ∈ {1..T}. ``posterior_variances[0]`` is 0 by the ᾱ_0 = 1 convention.
    """

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    posterior_variances: torch.Tensor

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t with ᾱ_0 = 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def posterior_variance(self, t: int) -> float:
        """β̃_t = ((1 - ᾱ_{t-1}) / (1 - ᾱ_t)) β_t."""
        self._check_t(t)
        return float(self.posterior_variances[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(
    kind: str = "scaled_linear",
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Build a NoiseSchedule.

    ``linear`` spaces β evenly; ``scaled_linear`` spaces √β evenly and
    squares (the common latent-diffusion default).
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got "
            f"beta_start={beta_start}, beta_end={beta_end}"
        )
    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif kind == "scaled_linear":
        betas = torch.linspace(
            math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=torch.float64
        ) ** 2
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    prev_bars = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
    posterior_variances = (1.0 - prev_bars) / (1.0 - alpha_bars) * betas
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_variances=posterior_variances,
    )


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(
    z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Closed-form forward marginal: z_t = √ᾱ_t z_0 + √(1-ᾱ_t) ε."""
    _check_same_shape(z0, eps, "forward_diffuse")
    a_bar = sched.alpha_bar(t)
    return math.sqrt(a_bar) * z0 + math.sqrt(1.0 - a_bar) * eps


def posterior_params(
    z0: torch.Tensor, zt: torch.Tensor, t: int, sched: NoiseSchedule
) -> tuple[torch.Tensor, float]:
    """Mean and variance of q(z_{t-1} | z_t, z_0).

    μ̃ = (√ᾱ_{t-1} β_t / (1-ᾱ_t)) z_0 + (√α_t (1-ᾱ_{t-1}) / (1-ᾱ_t)) z_t
    """
    _check_same_shape(z0, zt, "posterior_params")
    sched._check_t(t)
    a_bar_t = sched.alpha_bar(t)
    a_bar_prev = sched.alpha_bar(t - 1)
    beta_t = sched.beta(t)
    alpha_t = sched.alpha(t)
    coef0 = math.sqrt(a_bar_prev) * beta_t / (1.0 - a_bar_t)
    coeft = math.sqrt(alpha_t) * (1.0 - a_bar_prev) / (1.0 - a_bar_t)
    mean = coef0 * z0 + coeft * zt
    return mean, sched.posterior_variance(t)


def predict_clean(
    zt: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Invert the forward marginal: ẑ_0 = (z_t - √(1-ᾱ_t) ε̂) / √ᾱ_t."""
    _check_same_shape(zt, eps_hat, "predict_clean")
    a_bar = sched.alpha_bar(t)
    return (zt - math.sqrt(1.0 - a_bar) * eps_hat) / math.sqrt(a_bar)


def ddpm_step_between(
    zt: torch.Tensor,
    t: int,
    s: int,
    eps_hat: torch.Tensor,
    noise: torch.Tensor,
    sched: NoiseSchedule,
    clamp: Optional[tuple[float, float]] = DEFAULT_CLAMP,
) -> torch.Tensor:
    """Reverse step from level t to level s < t (s = 0 means clean).

    Generalizes the adjacent-step posterior to strided timesteps by
    treating the t→s block as one effective transition with
    α_eff = ᾱ_t / ᾱ_s. For s = t - 1 this is the standard DDPM step.
    At s = 0 the posterior collapses to ẑ_0 and no noise is added.
    """
    _check_same_shape(zt, eps_hat, "ddpm_step")
    _check_same_shape(zt, noise, "ddpm_step")
    sched._check_t(t)
    if not 0 <= s < t:
        raise IndexError(f"target step {s} must satisfy 0 <= s < t={t}")

    z0_hat = predict_clean(zt, t, eps_hat, sched)
    if clamp is not None:
        z0_hat = z0_hat.clamp(clamp[0], clamp[1])

    a_bar_t = sched.alpha_bar(t)
    a_bar_s = sched.alpha_bar(s)
    alpha_eff = a_bar_t / a_bar_s
    beta_eff = 1.0 - alpha_eff
    coef0 = math.sqrt(a_bar_s) * beta_eff / (1.0 - a_bar_t)
    coeft = math.sqrt(alpha_eff) * (1.0 - a_bar_s) / (1.0 - a_bar_t)
    mean = coef0 * z0_hat + coeft * zt
    if s == 0:
        return mean
    var = (1.0 - a_bar_s) / (1.0 - a_bar_t) * beta_eff
    return mean + math.sqrt(var) * noise


def ddpm_step(
    zt: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    noise: torch.Tensor,
    sched: NoiseSchedule,
    clamp: Optional[tuple[float, float]] = DEFAULT_CLAMP,
) -> torch.Tensor:
    """Single reverse step z_t -> z_{t-1}; the noise term is omitted at t=1."""
    return ddpm_step_between(zt, t, t - 1, eps_hat, noise, sched, clamp=clamp)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Noise-prediction objective: mean squared error ‖ε - ε̂‖² / N."""
    _check_same_shape(eps, eps_hat, "diffusion_loss")
    return ((eps - eps_hat) ** 2).mean()


def strided_timesteps(T: int, num_steps: int) -> list[int]:
    """Evenly spaced decreasing sub-sequence of {1..T} ending at 1,
    starting at T. num_steps = T reproduces the full chain."""
    if not 1 <= num_steps <= T:
        raise ScheduleError(f"num_steps must be in [1, {T}], got {num_steps}")
    if num_steps == 1:
        return [T]
    steps = torch.linspace(T, 1, num_steps).round().to(torch.long).tolist()
    # deduplicate while preserving order (possible for num_steps close to T)
    out: list[int] = []
    for v in steps:
        if not out or v < out[-1]:
            out.append(int(v))
    return out


def sample(
    denoise_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: Sequence[int],
    sched: NoiseSchedule,
    rng_seed: int,
    num_steps: Optional[int] = None,
    clamp: Optional[tuple[float, float]] = DEFAULT_CLAMP,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Ancestral sampling: draw z_T ~ N(0, I) and reverse down to z_0.

    ``denoise_fn(z_t, t)`` returns ε̂. ``num_steps`` strides the chain;
    None runs all T steps. Identical seeds give identical outputs.
    """
    gen = torch.Generator(device="cpu").manual_seed(int(rng_seed))
    z = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    steps = strided_timesteps(sched.T, num_steps or sched.T)
    bounds = steps[1:] + [0]
    for t, s in zip(steps, bounds):
        try:
            eps_hat = denoise_fn(z, t)
        except Exception as exc:
            raise RuntimeError(f"denoise_fn failed at timestep t={t}") from exc
        noise = torch.randn(z.shape, generator=gen, dtype=dtype)
        z = ddpm_step_between(z, t, s, eps_hat, noise, sched, clamp=clamp)
    return z
