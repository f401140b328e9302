"""Forward/reverse diffusion math: linear noise schedule, forward noising,
single-step clean-image estimation, and the deterministic DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ContractError, DomainError

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02
DEFAULT_DDIM_STEPS = 50


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor  # (T,), strictly increasing
    alphas: torch.Tensor  # 1 - betas
    alpha_bars: torch.Tensor  # cumulative products

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t):
        """Cumulative alpha for step t (1-based int or integer tensor)."""
        t_idx = torch.as_tensor(t, dtype=torch.long) - 1
        if (t_idx < 0).any() or (t_idx >= self.T).any():
            raise DomainError(f"t must lie in 1..{self.T}")
        return self.alpha_bars[t_idx]


def make_schedule(
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    if T < 10:
        raise ConfigurationError(f"T must be >= 10, got {T}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ConfigurationError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    betas = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def _broadcast_abar(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    abar = sched.alpha_bar(t).to(like.dtype)
    while abar.dim() < like.dim():
        abar = abar.unsqueeze(-1)
    return abar


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ContractError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    abar = _broadcast_abar(sched, t, x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def x0_estimate(x_t: torch.Tensor, eps_pred: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Single-step clean-image estimate; differentiable w.r.t. eps_pred."""
    if x_t.shape != eps_pred.shape:
        raise ContractError(f"x_t shape {x_t.shape} != eps_pred shape {eps_pred.shape}")
    abar = _broadcast_abar(sched, t, x_t)
    if (abar == 0).any():
        raise DomainError("alpha_bar is zero at t; x0 estimate is singular")
    return (x_t - (1.0 - abar).sqrt() * eps_pred) / abar.sqrt()


def scale_to_model(x01: torch.Tensor) -> torch.Tensor:
    """Map [0,1] images into the [-1,1] domain the denoiser operates in."""
    return 2.0 * x01 - 1.0


def unscale_from_model(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


def ddim_timesteps(T: int, steps: int) -> list[int]:
    ts = torch.linspace(T, 1, steps).round().long().tolist()
    return [int(t) for t in ts]


@torch.no_grad()
def ddim_sample(
    model,
    sched: NoiseSchedule,
    ctx: torch.Tensor,
    controls=None,
    steps: int = DEFAULT_DDIM_STEPS,
    seed: int = 0,
    shape: tuple[int, ...] = (1, 3, 32, 32),
    guidance_scale: float | None = None,
    null_ctx: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM trajectory from seeded noise; returns [0,1] images."""
    if steps > sched.T:
        raise ConfigurationError(f"steps {steps} > schedule length {sched.T}")
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen, dtype=torch.float32)
    taus = ddim_timesteps(sched.T, steps)
    batch = shape[0]
    for i, t in enumerate(taus):
        t_vec = torch.full((batch,), t, dtype=torch.long)
        eps = model(x, t_vec, ctx, controls)
        if guidance_scale is not None:
            if null_ctx is None:
                raise ConfigurationError("guidance requires a null context")
            eps_u = model(x, t_vec, null_ctx, controls)
            eps = eps_u + guidance_scale * (eps - eps_u)
        x0_hat = x0_estimate(x, eps, t, sched)
        if i + 1 < len(taus):
            abar_next = _broadcast_abar(sched, taus[i + 1], x)
            x = abar_next.sqrt() * x0_hat + (1.0 - abar_next).sqrt() * eps
        else:
            x = x0_hat
    return unscale_from_model(x).clamp(0.0, 1.0)
