"""Denoising-model backends: a from-scratch pixel-space toy backbone and an
adapter for pretrained latent diffusion checkpoints, behind one contract."""

from .schedule import DiffusionState, DenoisedLatent, NoiseSchedule, ScheduleError, forward_process, one_step_denoise
from .lora import AdapterConfig, LoRALinear, adapter_parameter_count
from .text import PromptEncoding, PromptVocab, ToyTextEncoder, tokenize_words
from .unet import AttentionCapture, ToyUNet
from .toy import ToyBackbone
from .sampler import ddim_sample, ddim_timesteps

__all__ = [
    "AdapterConfig",
    "AttentionCapture",
    "DenoisedLatent",
    "DiffusionState",
    "LoRALinear",
    "NoiseSchedule",
    "PromptEncoding",
    "PromptVocab",
    "ScheduleError",
    "ToyBackbone",
    "ToyTextEncoder",
    "ToyUNet",
    "adapter_parameter_count",
    "ddim_sample",
    "ddim_timesteps",
    "forward_process",
    "one_step_denoise",
    "tokenize_words",
]
