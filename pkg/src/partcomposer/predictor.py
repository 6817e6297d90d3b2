"""Concept predictor: multi-label classification + per-concept segmentation
over one-step-denoised latents.

The predictor realizes the variational posterior over concept codes.  Under
the factorized Bernoulli model, the negative log-likelihood of the true code
is exactly the multi-label binary cross-entropy, so the classification and
segmentation losses below are what gets minimized to tighten the mutual-
information lower bound between latents and codes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

PROB_EPS = 1e-12


@dataclass
class ConceptCode:
    """Multi-hot presence vector over all concept tokens."""

    code: torch.Tensor  # (K,) or (B, K), entries in {0, 1}

    def __post_init__(self):
        vals = self.code
        if not ((vals == 0) | (vals == 1)).all():
            raise ValueError("concept code entries must be 0 or 1")


@dataclass
class ConceptPrediction:
    """Per-concept presence probabilities and spatial mask logits."""

    class_probs: torch.Tensor  # (B, K) in [0, 1]
    seg_logits: torch.Tensor  # (B, K, H, W) at mask resolution
    class_logits: torch.Tensor | None = None  # kept for numerically stable BCE


class ConceptPredictor(nn.Module):
    """Three stride-2 convolutions (16, 32, 64 channels) with two heads:
    global-pooled features -> two fully connected layers -> K sigmoid
    probabilities, and a 1x1 convolution -> bilinear upsample -> K mask
    logit channels."""

    def __init__(self, num_concepts: int, in_channels: int = 3, mask_resolution: int = 64):
        super().__init__()
        self.num_concepts = num_concepts
        self.mask_resolution = mask_resolution
        self.conv1 = nn.Conv2d(in_channels, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.fc1 = nn.Linear(64, 64)
        self.fc2 = nn.Linear(64, num_concepts)
        self.seg_head = nn.Conv2d(64, num_concepts, 1)

    def forward(self, z_tilde: torch.Tensor) -> ConceptPrediction:
        if z_tilde.dim() == 3:
            z_tilde = z_tilde.unsqueeze(0)
        h = F.relu(self.conv1(z_tilde))
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))

        pooled = h.mean(dim=(2, 3))
        logits = self.fc2(F.relu(self.fc1(pooled)))

        seg = self.seg_head(h)
        seg = F.interpolate(
            seg, size=(self.mask_resolution, self.mask_resolution),
            mode="bilinear", align_corners=False,
        )
        return ConceptPrediction(
            class_probs=torch.sigmoid(logits), seg_logits=seg, class_logits=logits
        )

    predict = forward


def info_loss(
    pred: ConceptPrediction,
    target_code: ConceptCode | torch.Tensor,
    target_masks: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Classification and segmentation negative log-likelihoods.

    ``target_masks`` are the sample's exclusive per-concept masks at the
    segmentation resolution; channels of absent concepts are all zero.  Both
    losses are plain means of per-element binary cross-entropies.
    """
    code = target_code.code if isinstance(target_code, ConceptCode) else target_code
    code = code.to(pred.class_probs.dtype)
    if code.dim() == 1:
        code = code.unsqueeze(0)
    masks = target_masks.to(pred.seg_logits.dtype)
    if masks.dim() == 3:
        masks = masks.unsqueeze(0)
    if torch.isnan(pred.class_probs).any() or torch.isnan(pred.seg_logits).any():
        raise ValueError("NaN in predictor outputs")
    if torch.isnan(masks).any():
        raise ValueError("NaN in target masks")

    if pred.class_logits is not None:
        cls = F.binary_cross_entropy_with_logits(pred.class_logits, code)
    else:
        # Clamp must stay representable: 1 - 1e-12 rounds to 1.0 in float32.
        eps = PROB_EPS if pred.class_probs.dtype == torch.float64 else 1e-7
        probs = pred.class_probs.to(code.dtype).clamp(eps, 1 - eps)
        cls = -(code * probs.log() + (1 - code) * (1 - probs).log()).mean()
    seg = F.binary_cross_entropy_with_logits(pred.seg_logits, masks)
    return cls, seg
