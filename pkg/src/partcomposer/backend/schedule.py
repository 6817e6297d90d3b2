"""Noise schedule and the forward / one-step-inverse diffusion algebra.

The one-step denoise is the full jump to the clean estimate,

    z_tilde = (z_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t),

so feeding back the true noise recovers z_0 exactly.  Note the division
amplifies round-off near the end of the schedule where alpha_bar is tiny;
use float64 inputs when exact inversion matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


class ScheduleError(ValueError):
    """Raised for timesteps or alpha_bar values outside the valid range."""


class NoiseSchedule:
    """Cumulative signal levels alpha_bar over ``num_steps`` training timesteps.

    ``kind='cosine'`` is the squared-cosine schedule with offset ``s``;
    ``kind='linear'`` interpolates betas between ``beta_start`` and
    ``beta_end``.  alpha_bar[0] is exactly 1 and is excluded from the usable
    range: valid training timesteps are 1 .. num_steps - 1.
    """

    def __init__(
        self,
        num_steps: int = 1000,
        kind: str = "cosine",
        s: float = 0.008,
        beta_start: float = 8.5e-4,
        beta_end: float = 0.012,
        max_beta: float = 0.999,
        betas: torch.Tensor | None = None,
    ):
        if num_steps < 2:
            raise ScheduleError("schedule needs at least 2 timesteps")
        self.num_steps = num_steps
        self.kind = kind
        if betas is not None:
            betas = torch.as_tensor(betas, dtype=torch.float64)
            if betas.numel() != num_steps:
                raise ScheduleError("explicit betas must have num_steps entries")
            self.kind = "explicit"
        elif kind == "cosine":
            t = torch.arange(num_steps + 1, dtype=torch.float64)
            f = torch.cos(((t / num_steps + s) / (1 + s)) * math.pi / 2) ** 2
            alpha_bar = f / f[0]
            # Clip per-step betas like standard implementations do.
            betas = torch.clamp(1 - alpha_bar[1:] / alpha_bar[:-1], max=max_beta)
        elif kind == "linear":
            betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
        elif kind == "scaled_linear":
            betas = (
                torch.linspace(beta_start**0.5, beta_end**0.5, num_steps, dtype=torch.float64) ** 2
            )
        else:
            raise ScheduleError(f"unknown schedule kind {kind!r}")
        alphas = 1.0 - betas
        bar = torch.cumprod(alphas, dim=0)
        self.alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), bar])

    def alpha_bar(self, t: int | torch.Tensor) -> torch.Tensor:
        """alpha_bar at integer timestep(s) t, validated to lie in (0, 1)."""
        t_tensor = torch.as_tensor(t, dtype=torch.long)
        if (t_tensor < 1).any() or (t_tensor > self.num_steps).any():
            raise ScheduleError(
                f"timestep {t} outside schedule range [1, {self.num_steps}]"
            )
        ab = self.alpha_bars[t_tensor]
        if (ab <= 0).any() or (ab >= 1).any():
            raise ScheduleError(f"alpha_bar at t={t} is outside (0, 1)")
        return ab


@dataclass
class DiffusionState:
    """A noised latent together with the exact ingredients that produced it."""

    z_t: torch.Tensor
    t: torch.Tensor  # long, one entry per batch element (or scalar)
    epsilon: torch.Tensor
    alpha_bar_t: torch.Tensor  # same leading shape as t


@dataclass
class DenoisedLatent:
    """The one-step clean estimate fed to the concept predictor."""

    z_tilde: torch.Tensor
    source_t: torch.Tensor
    grad_enabled: bool = field(init=False)

    def __post_init__(self):
        self.grad_enabled = bool(self.z_tilde.requires_grad)


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    while coef.dim() < like.dim():
        coef = coef.unsqueeze(-1)
    return coef.to(like.dtype)


def forward_process(
    z_0: torch.Tensor,
    t: int | torch.Tensor,
    epsilon: torch.Tensor,
    schedule: NoiseSchedule,
) -> DiffusionState:
    """z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) epsilon."""
    if epsilon.shape != z_0.shape:
        raise ValueError(f"noise shape {epsilon.shape} != latent shape {z_0.shape}")
    t_tensor = torch.as_tensor(t, dtype=torch.long)
    ab = schedule.alpha_bar(t_tensor)
    z_t = _broadcast(ab.sqrt(), z_0) * z_0 + _broadcast((1 - ab).sqrt(), z_0) * epsilon
    return DiffusionState(z_t=z_t, t=t_tensor, epsilon=epsilon, alpha_bar_t=ab)


def one_step_denoise(state: DiffusionState, epsilon_hat: torch.Tensor) -> DenoisedLatent:
    """Invert the forward process with the predicted noise (gradients flow
    through ``epsilon_hat``)."""
    if epsilon_hat.shape != state.z_t.shape:
        raise ValueError(
            f"predicted noise shape {epsilon_hat.shape} != latent shape {state.z_t.shape}"
        )
    ab = state.alpha_bar_t
    if (ab <= 0).any() or (ab >= 1).any():
        raise ScheduleError("alpha_bar_t must lie strictly inside (0, 1)")
    ab = torch.as_tensor(ab)
    z_tilde = (state.z_t - _broadcast((1 - ab).sqrt(), state.z_t) * epsilon_hat) / _broadcast(
        ab.sqrt(), state.z_t
    )
    return DenoisedLatent(z_tilde=z_tilde, source_t=state.t)
