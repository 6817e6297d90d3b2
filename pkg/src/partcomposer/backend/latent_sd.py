"""Adapter for pretrained latent diffusion checkpoints (Stable Diffusion v2.1
class models).

Presents the same contract as the toy backbone -- prompt encoding with
placeholder tokens, epsilon prediction with cross-attention capture, staged
trainable-parameter sets, adapters on attention projections -- on top of the
``diffusers``/``transformers`` stack.  The stack is imported lazily;
without it only :func:`downsample_mask_to_latent` is usable and constructing
the backbone raises :class:`BackendUnavailableError`.

Full-scale fine-tuning runs are not desk-reproducible; this adapter exists so
trained checkpoints and accelerator environments can reuse the exact same
training loop and losses as the toy path.
"""

from __future__ import annotations

import re

import numpy as np
import torch
from torch.nn import functional as F

from .lora import AdapterConfig, LoRALinear, iter_lora_parameters
from .schedule import NoiseSchedule
from .text import PromptEncoding
from .toy import ParameterSet
from .unet import AttentionCapture

PLACEHOLDER_RE = re.compile(r"<v\d+>|<bg\d+>")


class BackendUnavailableError(RuntimeError):
    """Raised when the pretrained-model stack is not installed."""


def _require_stack():
    try:
        import diffusers
        import transformers
    except ImportError as err:  # pragma: no cover - exercised only without the stack
        raise BackendUnavailableError(
            "the latent-diffusion backbone requires the 'diffusers' and "
            "'transformers' packages plus a downloaded checkpoint; install them "
            "(and run on an accelerator) or use backbone='toy'"
        ) from err
    return diffusers, transformers


def downsample_mask_to_latent(mask: np.ndarray | torch.Tensor, latent_size: int) -> torch.Tensor:
    """Area-average a binary mask down to the latent grid, then threshold at 0.5."""
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask.astype(np.float32))
    mask = mask.to(torch.float32)
    if mask.shape[-1] == latent_size and mask.shape[-2] == latent_size:
        return mask > 0.5
    pooled = F.adaptive_avg_pool2d(mask[None, None], (latent_size, latent_size))[0, 0]
    return pooled > 0.5


class _CaptureProcessor:
    """Attention processor that records cross-attention probabilities."""

    def __init__(self, store: list, capture_positions: int):
        self.store = store
        self.capture_positions = capture_positions  # HW at the capture resolution

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        residual = hidden_states
        query = attn.to_q(hidden_states)
        context = encoder_hidden_states if encoder_hidden_states is not None else hidden_states
        key = attn.to_k(context)
        value = attn.to_v(context)

        query = attn.head_to_batch_dim(query)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)

        probs = attn.get_attention_scores(query, key, attention_mask)
        if encoder_hidden_states is not None and probs.shape[1] == self.capture_positions:
            heads = attn.heads
            b = probs.shape[0] // heads
            self.store.append(probs.reshape(b, heads, *probs.shape[1:]).mean(dim=1))

        hidden_states = torch.bmm(probs, value)
        hidden_states = attn.batch_to_head_dim(hidden_states)
        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states / attn.rescale_output_factor


class LatentDiffusionBackbone(torch.nn.Module):
    """Stable-Diffusion-class backbone behind the common backend contract."""

    def __init__(
        self,
        concept_tokens: list[str],
        model_name: str = "stabilityai/stable-diffusion-2-1-base",
        resolution: int = 512,
        capture_resolution: int = 16,
        device: str = "cuda",
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        diffusers, transformers = _require_stack()

        self.resolution = resolution
        self.capture_res = capture_resolution
        self._device = device

        self.vae = diffusers.AutoencoderKL.from_pretrained(model_name, subfolder="vae")
        self.text_model = transformers.CLIPTextModel.from_pretrained(
            model_name, subfolder="text_encoder"
        )
        self.tokenizer = transformers.CLIPTokenizer.from_pretrained(
            model_name, subfolder="tokenizer"
        )
        self.unet = diffusers.UNet2DConditionModel.from_pretrained(model_name, subfolder="unet")
        self.vae.requires_grad_(False)

        sched_cfg = self.unet.config if hasattr(self.unet.config, "num_train_timesteps") else None
        ddpm = diffusers.DDPMScheduler.from_pretrained(model_name, subfolder="scheduler")
        self.schedule = NoiseSchedule(
            num_steps=int(ddpm.config.num_train_timesteps),
            betas=ddpm.betas,
        )
        del sched_cfg

        # Register placeholder tokens and remember which embedding rows are new.
        added = self.tokenizer.add_tokens(list(concept_tokens))
        if added != len(concept_tokens):
            raise ValueError("some concept tokens already existed in the tokenizer")
        self.text_model.resize_token_embeddings(len(self.tokenizer))
        self.concept_tokens = list(concept_tokens)
        self.concept_ids = self.tokenizer.convert_tokens_to_ids(self.concept_tokens)

        self._capture_store: list = []
        self._install_processors()
        self.to(device=device, dtype=dtype)

    # -- capture plumbing ---------------------------------------------------

    def _install_processors(self):
        procs = {}
        for name in self.unet.attn_processors:
            if name.endswith("attn2.processor"):
                procs[name] = _CaptureProcessor(self._capture_store, self.capture_res**2)
            else:
                procs[name] = type(self.unet.attn_processors[name])()
        self.unet.set_attn_processor(procs)

    # -- image <-> latent ---------------------------------------------------

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        down = self.resolution // self.vae_scale_factor
        return (self.unet.config.in_channels, down, down)

    @property
    def vae_scale_factor(self) -> int:
        return 2 ** (len(self.vae.config.block_out_channels) - 1)

    @property
    def attention_resolution(self) -> int:
        return self.capture_res

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        arr = torch.from_numpy(np.ascontiguousarray(image)).float() / 127.5 - 1.0
        arr = arr.permute(2, 0, 1).unsqueeze(0).to(self._device)
        with torch.no_grad():
            latent = self.vae.encode(arr).latent_dist.mean * self.vae.config.scaling_factor
        return latent[0]

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            img = self.vae.decode(latent.unsqueeze(0) / self.vae.config.scaling_factor).sample[0]
        img = ((img.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
        return img.permute(1, 2, 0).cpu().numpy()

    def white_latent(self) -> torch.Tensor:
        white = np.full((self.resolution, self.resolution, 3), 255, dtype=np.uint8)
        return self.encode_image(white)

    def downsample_mask(self, mask: np.ndarray | torch.Tensor) -> torch.Tensor:
        return downsample_mask_to_latent(mask, self.latent_shape[-1]).float()

    # -- prompting ----------------------------------------------------------

    def encode_prompt(self, prompt: str) -> PromptEncoding:
        enc = self.tokenizer(
            prompt,
            padding="max_length",
            truncation=True,
            max_length=self.tokenizer.model_max_length,
            return_tensors="pt",
        )
        ids = enc.input_ids[0].to(self._device)
        embeddings = self.text_model(ids.unsqueeze(0))[0][0]
        positions: dict[str, int] = {}
        id_list = ids.tolist()
        for token, tid in zip(self.concept_tokens, self.concept_ids):
            if tid in id_list and PLACEHOLDER_RE.fullmatch(token) and token in prompt:
                positions[token] = id_list.index(tid)
        pad_id = self.tokenizer.pad_token_id
        return PromptEncoding(
            prompt=prompt,
            ids=ids,
            embeddings=embeddings,
            key_padding_mask=ids == pad_id,
            token_positions=positions,
        )

    # -- noise prediction ---------------------------------------------------

    def predict_noise(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        encodings: list[PromptEncoding] | PromptEncoding,
    ) -> tuple[torch.Tensor, list[AttentionCapture]]:
        single = isinstance(encodings, PromptEncoding)
        if single:
            encodings = [encodings]
        if z_t.dim() == 3:
            z_t = z_t.unsqueeze(0)
        t = torch.as_tensor(t, dtype=torch.long, device=z_t.device)
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])

        ctx = torch.stack([e.embeddings for e in encodings])
        self._capture_store.clear()
        eps_hat = self.unet(z_t, t, encoder_hidden_states=ctx).sample

        captures: list[AttentionCapture] = []
        if self._capture_store:
            mean_probs = torch.stack(self._capture_store).mean(dim=0)  # (B, HW, L)
            for b, enc in enumerate(encodings):
                maps = {}
                for token, pos in enc.token_positions.items():
                    raw = mean_probs[b, :, pos].reshape(self.capture_res, self.capture_res)
                    total = raw.sum()
                    maps[token] = raw / total if total > 0 else raw
                captures.append(AttentionCapture(maps=maps, resolution=self.capture_res))
        else:
            captures = [AttentionCapture(maps={}, resolution=self.capture_res) for _ in encodings]
        return eps_hat, captures

    # -- stages -------------------------------------------------------------

    def apply_adapter(self, config: AdapterConfig) -> None:
        mapping = {"q": "to_q", "k": "to_k", "v": "to_v", "out": "to_out"}
        for module in self.unet.modules():
            if module.__class__.__name__ == "Attention" and getattr(module, "is_cross_attention", False):
                for target in config.targets:
                    attr = mapping[target]
                    layer = getattr(module, attr)
                    if target == "out":
                        if not isinstance(layer[0], LoRALinear):
                            layer[0] = LoRALinear(layer[0], config.rank)
                    elif not isinstance(layer, LoRALinear):
                        setattr(module, attr, LoRALinear(layer, config.rank))

    def trainable_parameters(self, stage: int) -> ParameterSet:
        """Stage 1 trains the token-embedding matrix (callers must restore the
        non-placeholder rows after each optimizer step, since pretrained rows
        share the matrix); stage 2 trains the text encoder and adapters."""
        emb = self.text_model.get_input_embeddings().weight
        if stage == 1:
            return ParameterSet(stage=1, groups={"token_embeddings": [emb]})
        if stage == 2:
            text = [p for p in self.text_model.parameters() if id(p) != id(emb)]
            return ParameterSet(
                stage=2,
                groups={
                    "token_embeddings": [emb],
                    "text_encoder": text,
                    "adapter": list(iter_lora_parameters(self.unet)),
                },
            )
        raise ValueError(f"stage must be 1 or 2, got {stage}")
