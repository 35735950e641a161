from dataclasses import dataclass

import torch

from .datatypes import ScheduleConfig


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficients of the forward diffusion chain.

    Tensors are float64 and 0-indexed internally; the accessors take 1-indexed
    timesteps, with `alpha_bar(0) == 1` meaning clean data.

    Attributes
    ----------
    betas
        Variance increments beta_t for t = 1..T.
    alphas
        1 - beta_t.
    alpha_bars
        Cumulative products of alphas.
    """

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def check_timestep(self, t: int | torch.Tensor, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        t = torch.as_tensor(t)
        if t.numel() == 0 or int(t.min()) < lo or int(t.max()) > self.T:
            raise ValueError(f"timestep {t.tolist()} outside [{lo}, {self.T}]")

    def alpha_bar(self, t: int | torch.Tensor) -> torch.Tensor:
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bars])
        return padded[torch.as_tensor(t)]

    def beta(self, t: int | torch.Tensor) -> torch.Tensor:
        return self.betas[torch.as_tensor(t) - 1]

    def alpha(self, t: int | torch.Tensor) -> torch.Tensor:
        return self.alphas[torch.as_tensor(t) - 1]

    def posterior_std(self, t: int) -> torch.Tensor:
        variance = self.beta(t) * (1 - self.alpha_bar(t - 1)) / (1 - self.alpha_bar(t))
        return variance.sqrt()


def _from_betas(betas: torch.Tensor) -> NoiseSchedule:
    if betas.numel() < 1:
        raise ValueError("A noise schedule needs at least one timestep")
    if not bool(((betas > 0) & (betas < 1)).all()):
        raise ValueError("betas must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas from `beta_start` to `beta_end` inclusive."""
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"Expected 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return _from_betas(betas)


def from_config(config: ScheduleConfig) -> NoiseSchedule:
    return make_linear_schedule(config.T, config.beta_start, config.beta_end)


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Coefficients for a scalar or per-sample timestep, shaped to broadcast over `like`."""
    coef = coef.to(like.dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(
    z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Closed-form forward process sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps.

    `t` is either a single timestep or one per leading batch entry. t = 0 returns
    `z0` unchanged.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    s.check_timestep(t, allow_zero=True)
    ab = s.alpha_bar(t)
    return _broadcast(ab.sqrt(), z0) * z0 + _broadcast((1 - ab).sqrt(), z0) * eps


def ddpm_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    s: NoiseSchedule,
    noise: torch.Tensor | None,
) -> torch.Tensor:
    """One ancestral reverse step with the posterior variance. `noise` is ignored at t = 1."""
    if eps_hat.shape != z_t.shape:
        raise ValueError(
            f"predicted noise shape {tuple(eps_hat.shape)} != latent shape {tuple(z_t.shape)}"
        )
    s.check_timestep(t)
    t = int(t)
    beta, alpha, ab = s.beta(t), s.alpha(t), s.alpha_bar(t)
    coef = (beta / (1 - ab).sqrt()).to(z_t.dtype)
    mean = (z_t - coef * eps_hat) / alpha.sqrt().to(z_t.dtype)
    if t == 1:
        return mean
    if noise is None or noise.shape != z_t.shape:
        raise ValueError("reverse noise must match the latent shape for t > 1")
    return mean + s.posterior_std(t).to(z_t.dtype) * noise


def respace(s: NoiseSchedule, steps: int) -> tuple[list[int], NoiseSchedule]:
    """Evenly spaced subset of `steps` timesteps and the retimed schedule over them.

    Returns the kept original timesteps (ascending, always ending at T) and a schedule of
    length `steps` with beta'_k = 1 - ab_{t_k} / ab_{t_(k-1)}, so that its
    cumulative products equal the original alpha bars at the kept timesteps.
    """
    if not 1 <= steps <= s.T:
        raise ValueError(f"steps must lie in [1, {s.T}], got {steps}")
    if steps == s.T:
        return list(range(1, s.T + 1)), s
    # k * T / steps for k = 1..steps; the gaps are at least 1 so rounding keeps them distinct
    positions = (torch.arange(1, steps + 1, dtype=torch.float64) * s.T / steps).round().long()
    kept = [int(t) for t in positions]
    ab = s.alpha_bar(torch.tensor(kept))
    prev = torch.cat([torch.ones(1, dtype=torch.float64), ab[:-1]])
    betas = 1 - ab / prev
    return kept, _from_betas(betas)
