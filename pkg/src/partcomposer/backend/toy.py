"""From-scratch pixel-space backbone for desk-scale runs.

The "latent" is the RGB image itself scaled to [-1, 1] (identity
encoder/decoder), so every contract of the latent-diffusion path -- token
embeddings, cross-attention capture, adapters, DDIM -- can be exercised in
minutes on a CPU.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .lora import AdapterConfig, iter_lora_parameters
from .schedule import NoiseSchedule
from .text import PromptEncoding, PromptVocab, ToyTextEncoder
from .unet import AttentionCapture, ToyUNet


@dataclass
class ToyBackboneConfig:
    resolution: int = 64
    timesteps: int = 1000
    schedule: str = "cosine"
    unet_base: int = 32
    unet_mults: tuple[int, ...] = (1, 2, 4)
    text_dim: int = 128
    text_layers: int = 2
    heads: int = 4
    adapter: dict | None = None  # {"rank": int, "targets": [...]} once applied

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_mults"] = list(self.unet_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyBackboneConfig":
        d = dict(d)
        d["unet_mults"] = tuple(d.get("unet_mults", (1, 2, 4)))
        return cls(**d)


@dataclass
class ParameterSet:
    """Named groups of trainable tensors for one optimization stage."""

    stage: int
    groups: dict[str, list[nn.Parameter]] = field(default_factory=dict)

    def all(self) -> list[nn.Parameter]:
        return [p for group in self.groups.values() for p in group]

    def count(self) -> int:
        return sum(p.numel() for p in self.all())

    def count_group(self, name: str) -> int:
        return sum(p.numel() for p in self.groups.get(name, []))


class ToyBackbone(nn.Module):
    """Text-conditioned pixel-space denoiser with attention capture."""

    def __init__(self, vocab: PromptVocab, config: ToyBackboneConfig | None = None):
        super().__init__()
        self.config = config or ToyBackboneConfig()
        self.vocab = vocab
        self.schedule = NoiseSchedule(self.config.timesteps, kind=self.config.schedule)
        self.text_encoder = ToyTextEncoder(
            vocab,
            dim=self.config.text_dim,
            num_layers=self.config.text_layers,
        )
        self.unet = ToyUNet(
            in_channels=3,
            base=self.config.unet_base,
            mults=self.config.unet_mults,
            ctx_dim=self.config.text_dim,
            heads=self.config.heads,
        )
        if self.config.adapter:
            self.unet.apply_adapter(AdapterConfig(
                rank=self.config.adapter["rank"],
                targets=tuple(self.config.adapter.get("targets", ("q", "k", "v", "out"))),
            ))

    # -- image <-> latent ---------------------------------------------------

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (3, self.config.resolution, self.config.resolution)

    @property
    def attention_resolution(self) -> int:
        return self.config.resolution // 4

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        """uint8 HxWx3 -> float latent (3, H, W) in [-1, 1]."""
        if image.shape[:2] != (self.config.resolution, self.config.resolution):
            raise ValueError(
                f"image size {image.shape[:2]} != backbone resolution {self.config.resolution}"
            )
        arr = torch.from_numpy(np.array(image)).to(self._dtype()) / 127.5 - 1.0
        return arr.permute(2, 0, 1)

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        arr = ((latent.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
        return arr.permute(1, 2, 0).cpu().numpy()

    def white_latent(self) -> torch.Tensor:
        return torch.ones(self.latent_shape, dtype=self._dtype())

    def downsample_mask(self, mask: np.ndarray | torch.Tensor) -> torch.Tensor:
        """Identity resolution: masks already live at latent resolution."""
        if isinstance(mask, np.ndarray):
            mask = torch.from_numpy(mask.astype(np.float32))
        return mask.to(self._dtype())

    def _dtype(self) -> torch.dtype:
        return next(self.unet.parameters()).dtype

    # -- prompting ----------------------------------------------------------

    def encode_prompt(self, prompt: str) -> PromptEncoding:
        return self.text_encoder.encode_prompt(prompt)

    # -- noise prediction ---------------------------------------------------

    def predict_noise(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        encodings: list[PromptEncoding] | PromptEncoding,
    ) -> tuple[torch.Tensor, list[AttentionCapture]]:
        """Epsilon prediction plus one AttentionCapture per batch element.

        Every placeholder token present in a prompt gets a map; maps are
        averaged over heads and attention layers and normalized to sum 1.
        """
        single = isinstance(encodings, PromptEncoding)
        if single:
            encodings = [encodings]
        if z_t.dim() == 3:
            z_t = z_t.unsqueeze(0)
        if z_t.shape[0] != len(encodings):
            raise ValueError(f"{z_t.shape[0]} latents but {len(encodings)} prompt encodings")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])

        ctx = torch.stack([e.embeddings for e in encodings])
        ctx_mask = torch.stack([e.key_padding_mask for e in encodings])
        eps_hat, probs_per_layer = self.unet(z_t, t, ctx, ctx_mask)

        res = self.attention_resolution
        mean_probs = torch.stack(probs_per_layer).mean(dim=0)  # (B, HW, L)
        captures = []
        for b, enc in enumerate(encodings):
            maps = {}
            for token, pos in enc.token_positions.items():
                raw = mean_probs[b, :, pos].reshape(res, res)
                total = raw.sum()
                maps[token] = raw / total if total > 0 else raw
            captures.append(AttentionCapture(maps=maps, resolution=res))
        return eps_hat, captures

    # -- stages -------------------------------------------------------------

    def apply_adapter(self, config: AdapterConfig) -> None:
        self.unet.apply_adapter(config)
        self.config.adapter = {"rank": config.rank, "targets": list(config.targets)}

    def trainable_parameters(self, stage: int) -> ParameterSet:
        """Stage 1: concept token embeddings only.  Stage 2: text encoder and
        adapter weights, with token embeddings kept trainable."""
        if stage == 1:
            return ParameterSet(
                stage=1,
                groups={"token_embeddings": [self.text_encoder.concept_embedding.weight]},
            )
        if stage == 2:
            concept = {id(self.text_encoder.concept_embedding.weight)}
            text = [
                p for p in self.text_encoder.parameters() if id(p) not in concept
            ]
            return ParameterSet(
                stage=2,
                groups={
                    "token_embeddings": [self.text_encoder.concept_embedding.weight],
                    "text_encoder": text,
                    "adapter": list(iter_lora_parameters(self.unet)),
                },
            )
        raise ValueError(f"stage must be 1 or 2, got {stage}")

    def base_parameters(self) -> list[nn.Parameter]:
        """Everything trained during toy base pretraining: the full U-Net
        (excluding adapters) and the text encoder minus concept embeddings."""
        skip = {id(p) for p in iter_lora_parameters(self.unet)}
        skip.add(id(self.text_encoder.concept_embedding.weight))
        return [p for p in self.parameters() if id(p) not in skip]
