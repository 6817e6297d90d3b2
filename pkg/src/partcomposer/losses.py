"""Training loss terms and their weighted combination.

total = ldm + attn + lambda_info * (cls + lambda_seg * seg) + lambda_bg * bg

The combination is plain arithmetic on whatever numeric type the components
carry (python floats or tensors), so the identity holds exactly at the
caller's precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch.nn import functional as F

from .backend.unet import AttentionCapture


@dataclass
class LossWeights:
    lambda_info: float = 0.05
    lambda_seg: float = 10.0
    lambda_bg: float = 0.01

    def __post_init__(self):
        for name in ("lambda_info", "lambda_seg", "lambda_bg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossBundle:
    """All loss components plus their weighted total, kept for logging."""

    ldm: float | torch.Tensor
    attn: float | torch.Tensor
    cls: float | torch.Tensor
    seg: float | torch.Tensor
    bg: float | torch.Tensor
    weights: LossWeights
    total: float | torch.Tensor = field(init=False)

    def __post_init__(self):
        w = self.weights
        self.total = (
            self.ldm
            + self.attn
            + w.lambda_info * (self.cls + w.lambda_seg * self.seg)
            + w.lambda_bg * self.bg
        )

    def detached(self) -> dict[str, float]:
        def scalar(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return {name: scalar(getattr(self, name)) for name in ("ldm", "attn", "cls", "seg", "bg", "total")}

    def record(self, step: int, stage: int) -> dict:
        """One line-delimited log record: step, stage, components, total, weights."""
        rec = {"step": step, "stage": stage}
        rec.update(self.detached())
        rec.update(
            lambda_info=self.weights.lambda_info,
            lambda_seg=self.weights.lambda_seg,
            lambda_bg=self.weights.lambda_bg,
        )
        return rec


def ldm_loss(epsilon_hat: torch.Tensor, epsilon: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and injected noise."""
    if epsilon_hat.shape != epsilon.shape:
        raise ValueError(f"shape mismatch {epsilon_hat.shape} vs {epsilon.shape}")
    return F.mse_loss(epsilon_hat, epsilon)


def normalize_map(m: torch.Tensor) -> torch.Tensor:
    total = m.sum()
    return m / total if float(total.detach()) != 0.0 else m


def attn_loss(
    capture: AttentionCapture,
    part_masks: dict[str, torch.Tensor],
) -> torch.Tensor:
    """Mean over present tokens of the MSE between the sum-normalized
    attention map and the sum-normalized mask at map resolution."""
    terms = []
    for token, mask in part_masks.items():
        if token not in capture.maps:
            continue
        amap = normalize_map(capture.maps[token])
        mask = mask.to(amap.dtype)
        if mask.shape != amap.shape:
            mask = F.adaptive_avg_pool2d(mask[None, None], amap.shape[-2:])[0, 0]
        terms.append(F.mse_loss(amap, normalize_map(mask)))
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).mean()


def bg_loss(
    z_tilde: torch.Tensor,
    white_latent: torch.Tensor,
    union_mask: torch.Tensor,
) -> torch.Tensor:
    """MSE between the denoised latent and the white reference, restricted to
    pixels outside the union of part masks."""
    mask = union_mask.to(z_tilde.dtype)
    outside = 1.0 - mask
    n = outside.sum()
    if float(n) == 0.0:
        return torch.zeros((), dtype=z_tilde.dtype)
    diff = (z_tilde - white_latent.to(z_tilde.dtype)) ** 2
    channels = diff.shape[-3] if diff.dim() >= 3 else 1
    return (diff * outside).sum() / (n * channels)


def total_loss(
    ldm, attn, cls, seg, bg,
    weights: LossWeights | None = None,
) -> LossBundle:
    """Assemble the bundle; every component must be finite."""
    weights = weights or LossWeights()
    for name, value in (("ldm", ldm), ("attn", attn), ("cls", cls), ("seg", seg), ("bg", bg)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError(f"non-finite loss component {name}={v}")
    return LossBundle(ldm=ldm, attn=attn, cls=cls, seg=seg, bg=bg, weights=weights)
