"""Low-rank adaptation of linear projections.

The adapter adds a rank-r update B @ A on top of a frozen base projection;
B starts at zero, so an un-trained adapter reproduces the base model
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

ATTENTION_TARGETS = ("q", "k", "v", "out")


@dataclass
class AdapterConfig:
    """Which attention projections get adapters and at what rank."""

    rank: int = 32
    targets: tuple[str, ...] = ATTENTION_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")
        unknown = set(self.targets) - set(ATTENTION_TARGETS)
        if unknown:
            raise ValueError(f"unknown adapter targets {sorted(unknown)}")


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank residual."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        self.base = base
        self.rank = rank
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) / rank)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + torch.nn.functional.linear(
            torch.nn.functional.linear(x, self.lora_a), self.lora_b
        )

    def lora_parameters(self) -> list[nn.Parameter]:
        return [self.lora_a, self.lora_b]


def adapter_parameter_count(module: nn.Module) -> int:
    """Total trainable adapter parameters: sum over layers of rank*(d_in + d_out)."""
    total = 0
    for m in module.modules():
        if isinstance(m, LoRALinear):
            total += m.lora_a.numel() + m.lora_b.numel()
    return total


def iter_lora_parameters(module: nn.Module):
    for m in module.modules():
        if isinstance(m, LoRALinear):
            yield m.lora_a
            yield m.lora_b
