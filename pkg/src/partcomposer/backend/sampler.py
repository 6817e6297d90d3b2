"""Deterministic DDIM sampling with classifier-free guidance."""

from __future__ import annotations

import numpy as np
import torch

from .schedule import ScheduleError


def ddim_timesteps(num_train_steps: int, steps: int) -> list[int]:
    """Descending timestep subsequence in [1, T-1]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > num_train_steps - 1:
        raise ScheduleError(
            f"{steps} sampling steps exceed schedule length {num_train_steps}"
        )
    ts = np.linspace(1, num_train_steps - 1, steps).round().astype(int)
    return sorted(set(int(t) for t in ts), reverse=True)


def ddim_sample(
    backbone,
    prompt: str,
    steps: int = 50,
    guidance_scale: float = 7.5,
    seed: int = 0,
    count: int = 1,
    clip_clean: bool = True,
) -> np.ndarray:
    """Sample ``count`` images for one prompt; image i uses seed ``seed + i``.

    Within each step the clean estimate is formed, optionally clamped to the
    valid latent range, and re-noised to the previous timestep (eta = 0).
    ``guidance_scale == 1`` short-circuits to the conditional branch alone,
    which is algebraically identical to guided sampling at scale 1.
    """
    schedule = backbone.schedule
    timesteps = ddim_timesteps(schedule.num_steps, steps)
    dtype = next(backbone.parameters()).dtype

    noises = []
    for i in range(count):
        g = torch.Generator().manual_seed(seed + i)
        noises.append(torch.randn(backbone.latent_shape, generator=g, dtype=torch.float32))
    x = torch.stack(noises).to(dtype)

    with torch.no_grad():
        cond = backbone.encode_prompt(prompt)
        uncond = backbone.encode_prompt("") if guidance_scale != 1.0 else None

        for idx, t in enumerate(timesteps):
            t_batch = torch.full((count,), t, dtype=torch.long)
            eps_cond, _ = backbone.predict_noise(x, t_batch, [cond] * count)
            if uncond is None:
                eps = eps_cond
            else:
                eps_uncond, _ = backbone.predict_noise(x, t_batch, [uncond] * count)
                eps = eps_uncond + guidance_scale * (eps_cond - eps_uncond)

            ab = schedule.alpha_bar(t).to(dtype)
            clean = (x - (1 - ab).sqrt() * eps) / ab.sqrt()
            if clip_clean:
                clean = clean.clamp(-1.0, 1.0)
            if idx + 1 < len(timesteps):
                ab_prev = schedule.alpha_bar(timesteps[idx + 1]).to(dtype)
                x = ab_prev.sqrt() * clean + (1 - ab_prev).sqrt() * eps
            else:
                x = clean

    return np.stack([backbone.decode_latent(img) for img in x])
