"""Two-stage training orchestration.

Stage 1 optimizes only the concept token embeddings; stage 2 additionally
trains the text encoder and the low-rank adapters on the denoiser's
cross-attention.  The concept predictor trains jointly throughout under its
own optimizer, receiving (and sending) gradients through the one-step
denoised latent.

The toy backbone starts from random weights, so desk-scale runs first build
a "pretrained" base (:func:`pretrain_toy_base`) on token-free prompts; the
two-stage schedule then personalizes that base exactly as a full-scale run
would personalize a pretrained latent diffusion model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backend.lora import AdapterConfig
from .backend.schedule import forward_process, one_step_denoise
from .backend.text import PromptVocab
from .backend.toy import ToyBackbone, ToyBackboneConfig
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .losses import LossWeights, attn_loss, bg_loss, ldm_loss, total_loss
from .predictor import ConceptPredictor, info_loss
from .registry import ConceptRegistry, load_registry
from .synthesis import PLACEHOLDER_RE, SynthesisConfig, make_batch, sample_collage

logger = logging.getLogger(__name__)


class TrainingAbortedError(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class Toggles:
    dynamic_synthesis: bool = True
    concept_predictor: bool = True


@dataclass
class TrainConfig:
    stage1_steps: int = 6400
    stage2_steps: int = 40000
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-6
    predictor_lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 0
    resolution: int = 512
    backbone: str = "toy"  # "toy" | "latent-diffusion"
    timesteps: int = 1000
    adapter_rank: int = 32
    unet_base: int = 32
    text_dim: int = 128
    text_layers: int = 2
    snapshot_every: int = 0  # 0 disables periodic checkpoints
    eval_every: int = 0  # 0 disables held-out accuracy tracking
    eval_samples: int = 64
    early_stop: int | None = None  # truncate the total schedule
    base_init: str | None = None  # path to a pretrained toy base state
    dataset_root: str | None = None

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be >= 0")
        for name in ("stage1_lr", "stage2_lr", "predictor_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def total_steps(self) -> int:
        total = self.stage1_steps + self.stage2_steps
        return min(total, self.early_stop) if self.early_stop else total

    def stage_at(self, step: int) -> int:
        if step < self.stage1_steps:
            return 1
        return 2 if self.stage2_steps else 1

    def to_flat_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("weights"))
        d.update(d.pop("toggles"))
        return d

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "TrainConfig":
        flat = dict(flat)
        weights = LossWeights(
            **{k: flat.pop(k) for k in ("lambda_info", "lambda_seg", "lambda_bg") if k in flat}
        )
        toggles = Toggles(
            **{k: flat.pop(k) for k in ("dynamic_synthesis", "concept_predictor") if k in flat}
        )
        return cls(weights=weights, toggles=toggles, **flat)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_flat_dict(json.loads(Path(path).read_text()))


def build_vocab(registry: ConceptRegistry) -> PromptVocab:
    tokens = list(registry.part_tokens) + list(registry.background_tokens)
    categories = list(registry.categories) + [registry.category]
    return PromptVocab.build(categories=categories, concept_tokens=tokens)


def build_backbone(registry: ConceptRegistry, config: TrainConfig) -> ToyBackbone:
    if config.backbone != "toy":
        from .backend.latent_sd import LatentDiffusionBackbone

        return LatentDiffusionBackbone(
            concept_tokens=list(registry.part_tokens) + list(registry.background_tokens),
            resolution=config.resolution,
        )
    return ToyBackbone(
        build_vocab(registry),
        ToyBackboneConfig(
            resolution=config.resolution,
            timesteps=config.timesteps,
            unet_base=config.unet_base,
            text_dim=config.text_dim,
            text_layers=config.text_layers,
        ),
    )


def strip_concept_tokens(prompt: str) -> str:
    """Replace placeholder tokens with a generic word (base-model prompts)."""
    return PLACEHOLDER_RE.sub("part", prompt)


def pretrain_toy_base(
    registry: ConceptRegistry,
    config: TrainConfig,
    steps: int,
    out_path: str | Path,
    lr: float = 2e-3,
    p_uncond: float = 0.1,
) -> Path:
    """Train the toy denoiser base (no adapters, no concept tokens) so the
    two-stage personalization starts from a model that already knows the
    visual domain and the prompt templates."""
    torch.manual_seed(config.seed)
    backbone = build_backbone(registry, config)
    rng = np.random.default_rng(config.seed)
    torch_rng = torch.Generator().manual_seed(config.seed)
    synth_cfg = SynthesisConfig(canvas_size=config.resolution)
    opt = torch.optim.Adam(backbone.base_parameters(), lr=lr)
    schedule = backbone.schedule

    for step in range(steps):
        samples = make_batch(registry, rng, synth_cfg)
        z0 = torch.stack([backbone.encode_image(s.image) for s in samples])
        t = torch.randint(1, schedule.num_steps, (len(samples),), generator=torch_rng)
        eps = torch.randn(z0.shape, generator=torch_rng)
        state = forward_process(z0, t, eps, schedule)
        prompts = [
            "" if rng.random() < p_uncond else strip_concept_tokens(s.prompt) for s in samples
        ]
        encodings = [backbone.encode_prompt(p) for p in prompts]
        eps_hat, _ = backbone.predict_noise(state.z_t, t, encodings)
        loss = ldm_loss(eps_hat, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0:
            logger.info("base pretrain step %d loss %.4f", step, float(loss.detach()))

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model_state": backbone.state_dict(),
            "config": backbone.config.to_dict(),
            "vocab": backbone.vocab.to_dict(),
            "steps": steps,
        },
        out,
    )
    return out


class Trainer:
    """Joint optimization of the backbone (per stage) and the concept predictor."""

    def __init__(
        self,
        registry: ConceptRegistry,
        config: TrainConfig,
        out_dir: str | Path,
    ):
        self.registry = registry
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(config.seed)
        self.backbone = build_backbone(registry, config)
        if config.base_init:
            base = torch.load(config.base_init, weights_only=False)
            if base["vocab"] != self.backbone.vocab.to_dict():
                raise ValueError("pretrained base was built with a different vocabulary")
            self.backbone.load_state_dict(base["model_state"])
        self.backbone.apply_adapter(AdapterConfig(rank=config.adapter_rank))
        self.predictor = ConceptPredictor(
            num_concepts=len(registry.part_tokens),
            in_channels=self.backbone.latent_shape[0],
            mask_resolution=config.resolution,
        )

        self.torch_rng = torch.Generator().manual_seed(config.seed + 1)
        self.synth_rng = np.random.default_rng(config.seed + 2)
        self.synth_cfg = SynthesisConfig(canvas_size=config.resolution)
        self.white = self.backbone.white_latent()

        self.global_step = 0
        self._stage = None
        self._main_opt: torch.optim.Adam | None = None
        self.predictor_opt = torch.optim.Adam(self.predictor.parameters(), lr=config.predictor_lr)
        self.last_checkpoint: Path | None = None
        self.loss_history: list[dict] = []
        self.accuracy_history: list[tuple[int, float]] = []
        self._log_file = None

    # -- stage plumbing -----------------------------------------------------

    def _ensure_stage(self, stage: int):
        if stage == self._stage and self._main_opt is not None:
            return
        lr = self.config.stage1_lr if stage == 1 else self.config.stage2_lr
        params = self.backbone.trainable_parameters(stage).all()
        self._main_opt = torch.optim.Adam(params, lr=lr)
        self._stage = stage

    # -- single optimization step --------------------------------------------

    def _mask_tensor(self, sample) -> torch.Tensor:
        """(K, H, W) exclusive mask stack in registry token order."""
        k = len(self.registry.part_tokens)
        size = self.config.resolution
        out = torch.zeros(k, size, size)
        for token, mask in sample.part_masks.items():
            out[self.registry.token_index(token)] = torch.from_numpy(mask.astype(np.float32))
        return out

    def step(self) -> dict:
        config = self.config
        stage = config.stage_at(self.global_step)
        self._ensure_stage(stage)

        samples = make_batch(
            self.registry, self.synth_rng, self.synth_cfg,
            dynamic=config.toggles.dynamic_synthesis,
        )
        z0 = torch.stack([self.backbone.encode_image(s.image) for s in samples])
        t = torch.randint(1, config.timesteps, (len(samples),), generator=self.torch_rng)
        eps = torch.randn(z0.shape, generator=self.torch_rng)
        state = forward_process(z0, t, eps, self.backbone.schedule)

        encodings = [self.backbone.encode_prompt(s.prompt) for s in samples]
        eps_hat, captures = self.backbone.predict_noise(state.z_t, t, encodings)
        denoised = one_step_denoise(state, eps_hat)

        ldm = ldm_loss(eps_hat, eps)
        attn_terms = []
        bg_terms = []
        for i, sample in enumerate(samples):
            masks = {
                tok: torch.from_numpy(m.astype(np.float32)) for tok, m in sample.part_masks.items()
            }
            attn_terms.append(attn_loss(captures[i], masks))
            union = self.backbone.downsample_mask(sample.union_mask.astype(np.float32))
            bg_terms.append(bg_loss(denoised.z_tilde[i], self.white, union))
        attn = torch.stack(attn_terms).mean()
        bg = torch.stack(bg_terms).mean()

        weights = config.weights
        if config.toggles.concept_predictor:
            codes = torch.stack([torch.from_numpy(s.concept_code.astype(np.float32)) for s in samples])
            target_masks = torch.stack([self._mask_tensor(s) for s in samples])
            pred = self.predictor(denoised.z_tilde)
            cls, seg = info_loss(pred, codes, target_masks)
        else:
            cls, seg = 0.0, 0.0
            weights = replace(weights, lambda_info=0.0)

        bundle = total_loss(ldm, attn, cls, seg, bg, weights)

        self._main_opt.zero_grad()
        self.predictor_opt.zero_grad()
        self.backbone.zero_grad(set_to_none=True)
        bundle.total.backward()
        self._main_opt.step()
        if config.toggles.concept_predictor:
            self.predictor_opt.step()

        record = bundle.record(step=self.global_step, stage=stage)
        self.global_step += 1
        return record

    # -- training loop ------------------------------------------------------

    def train(self, max_steps: int | None = None) -> Path:
        config = self.config
        target = config.total_steps if max_steps is None else min(
            config.total_steps, self.global_step + max_steps
        )
        if self._log_file is None:
            self._log_file = open(self.out_dir / "losses.jsonl", "a")

        while self.global_step < target:
            try:
                record = self.step()
            except ValueError as err:
                if "non-finite" in str(err) or "NaN" in str(err):
                    raise TrainingAbortedError(
                        f"aborting at step {self.global_step}: {err}", self.last_checkpoint
                    ) from err
                raise
            self.loss_history.append(record)
            self._log_file.write(json.dumps(record) + "\n")
            self._log_file.flush()

            if config.eval_every and self.global_step % config.eval_every == 0:
                acc = held_out_classification_accuracy(
                    self.backbone, self.predictor, self.registry,
                    n=config.eval_samples, seed=config.seed + 7919,
                    resolution=config.resolution,
                )
                self.accuracy_history.append((self.global_step, acc))
                with open(self.out_dir / "accuracy.jsonl", "a") as f:
                    f.write(json.dumps({"step": self.global_step, "accuracy": acc}) + "\n")

            if config.snapshot_every and self.global_step % config.snapshot_every == 0:
                self.save(self.out_dir / f"step_{self.global_step:06d}")

        final = self.save(self.out_dir / "final")
        self._log_file.close()
        self._log_file = None
        return final

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        manifest_extra = {
            "step": self.global_step,
            "stage": self.config.stage_at(self.global_step),
            "config": self.config.to_flat_dict(),
            "registry": {
                "part_tokens": list(self.registry.part_tokens),
                "background_tokens": list(self.registry.background_tokens),
                "categories": list(self.registry.categories),
                "category": self.registry.category,
                "token_table": {k: list(v) for k, v in self.registry.token_table.items()},
                "dataset_root": self.config.dataset_root,
            },
        }
        state_extra = {
            "optim_main": self._main_opt.state_dict() if self._main_opt else None,
            "optim_pred": self.predictor_opt.state_dict(),
            "optim_stage": self._stage,
            "torch_rng": self.torch_rng.get_state(),
            "synth_rng": self.synth_rng.bit_generator.state,
        }
        out = save_checkpoint(path, self.backbone, self.predictor, manifest_extra, state_extra)
        self.last_checkpoint = out
        return out

    @classmethod
    def resume(
        cls,
        checkpoint: str | Path | CheckpointBundle,
        registry: ConceptRegistry | None = None,
        out_dir: str | Path | None = None,
    ) -> "Trainer":
        """Rebuild a trainer that continues bit-exactly from a checkpoint."""
        bundle = checkpoint if isinstance(checkpoint, CheckpointBundle) else load_checkpoint(checkpoint)
        config = TrainConfig.from_flat_dict(bundle.manifest["config"])
        if registry is None:
            root = bundle.manifest["registry"].get("dataset_root")
            if not root:
                raise ValueError("checkpoint does not record a dataset root; pass registry=")
            registry = load_registry(root)
        if list(registry.part_tokens) != bundle.part_tokens:
            raise ValueError("registry token table does not match the checkpoint")

        # Skip base_init (weights come from the checkpoint state).
        trainer = cls(registry, replace(config, base_init=None), out_dir or bundle.path.parent)
        trainer.backbone.load_state_dict(bundle.state["model_state"])
        trainer.predictor.load_state_dict(bundle.state["predictor_state"])
        trainer.global_step = bundle.step
        if bundle.state.get("optim_main") is not None:
            trainer._ensure_stage(bundle.state.get("optim_stage") or bundle.stage)
            trainer._main_opt.load_state_dict(bundle.state["optim_main"])
        trainer.predictor_opt.load_state_dict(bundle.state["optim_pred"])
        trainer.torch_rng.set_state(bundle.state["torch_rng"])
        trainer.synth_rng.bit_generator.state = bundle.state["synth_rng"]
        trainer.last_checkpoint = bundle.path
        return trainer


def held_out_classification_accuracy(
    backbone: ToyBackbone,
    predictor: ConceptPredictor,
    registry: ConceptRegistry,
    n: int = 500,
    seed: int = 7919,
    resolution: int = 64,
    threshold: float = 0.5,
) -> float:
    """Exact-match accuracy of the predictor on freshly synthesized collages.

    Each sample is noised at a random timestep, denoised one step with the
    model's own prediction, and classified; a sample counts as correct only
    when every concept's presence bit is right.
    """
    rng = np.random.default_rng(seed)
    torch_rng = torch.Generator().manual_seed(seed)
    synth_cfg = SynthesisConfig(canvas_size=resolution)
    schedule = backbone.schedule
    correct = 0
    with torch.no_grad():
        for _ in range(n):
            sample = sample_collage(registry, rng, synth_cfg)
            z0 = backbone.encode_image(sample.image).unsqueeze(0)
            t = torch.randint(1, schedule.num_steps, (1,), generator=torch_rng)
            eps = torch.randn(z0.shape, generator=torch_rng)
            state = forward_process(z0, t, eps, schedule)
            enc = backbone.encode_prompt(sample.prompt)
            eps_hat, _ = backbone.predict_noise(state.z_t, t, [enc])
            z_tilde = one_step_denoise(state, eps_hat).z_tilde
            pred = predictor(z_tilde)
            predicted = (pred.class_probs[0] > threshold).numpy().astype(np.uint8)
            if (predicted == sample.concept_code).all():
                correct += 1
    return correct / n
