"""PartComposer: learn part-level visual concepts from single-image examples
and recompose them into new objects."""

from .registry import (
    ConceptRegistry,
    ExampleImage,
    HeterogeneousSlotsError,
    PartAsset,
    RegistryError,
    composition_space,
    load_registry,
)
from .synthesis import (
    SynthesisConfig,
    SynthesizedSample,
    build_inference_prompt,
    build_prompt,
    make_batch,
    parse_prompt_tokens,
    sample_collage,
    sample_instance,
)
from .losses import LossBundle, LossWeights, attn_loss, bg_loss, ldm_loss, total_loss
from .predictor import ConceptCode, ConceptPredictor, ConceptPrediction, info_loss
from .trainer import TrainConfig, Trainer, Toggles, pretrain_toy_base
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .service import CompositionRequest, compose, create_app, serve
from .toyworld import ToySpec, check_composition_fidelity, generate_toy_dataset

__version__ = "0.1.0"
