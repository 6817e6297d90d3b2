"""Shared fixtures: toy datasets, tiny backbones, and the (expensive)
end-to-end trained runs used by the acceptance suite.

The end-to-end artifacts are cached under .cache_e2e/ next to the repo so a
re-run of the suite does not retrain; delete that directory to force a fresh
run.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from partcomposer.backend.text import PromptVocab
from partcomposer.backend.toy import ToyBackbone, ToyBackboneConfig
from partcomposer.registry import load_registry
from partcomposer.toyworld import ToySpec, generate_toy_dataset

# Pinned by the acceptance criteria: 2 objects x 4 uniquely colored parts at
# 64x64, two-stage schedule of 2,000 + 3,000 steps.
E2E_SPEC = ToySpec(num_examples=2, parts_per_example=4, canvas=64, layout_seed=0)
E2E_STAGE1_STEPS = 2000
E2E_STAGE2_STEPS = 3000
E2E_PRETRAIN_STEPS = 3000
E2E_SEED = 0

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".cache_e2e"


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("toyds") / "data"
    generate_toy_dataset(E2E_SPEC, root)
    return root


@pytest.fixture(scope="session")
def toy_registry(toy_dataset_dir):
    return load_registry(toy_dataset_dir)


@pytest.fixture()
def tiny_backbone(toy_registry):
    """A small but full-featured backbone for contract tests (fast on CPU)."""
    from partcomposer.trainer import build_vocab

    torch.manual_seed(0)
    return ToyBackbone(
        build_vocab(toy_registry),
        ToyBackboneConfig(resolution=64, timesteps=200, unet_base=16, text_dim=64, text_layers=1),
    )


def micro_backbone(tokens=("<v1>", "<v2>"), resolution=8, seed=0) -> ToyBackbone:
    """Smallest possible backbone (8x8 latents) for finite-difference checks."""
    torch.manual_seed(seed)
    vocab = PromptVocab.build(categories=["object"], concept_tokens=list(tokens), max_len=16)
    return ToyBackbone(
        vocab,
        ToyBackboneConfig(resolution=resolution, timesteps=50, unet_base=8, text_dim=32, text_layers=1, heads=2),
    )


def _train_e2e_variant(dataset_dir: Path, out_dir: Path, base_path: Path, with_predictor: bool):
    from partcomposer.trainer import Toggles, TrainConfig, Trainer

    registry = load_registry(dataset_dir)
    config = TrainConfig(
        stage1_steps=E2E_STAGE1_STEPS,
        stage2_steps=E2E_STAGE2_STEPS,
        stage1_lr=5e-3,
        stage2_lr=2e-4,
        predictor_lr=1e-3,
        seed=E2E_SEED,
        resolution=64,
        timesteps=1000,
        adapter_rank=8,
        unet_base=32,
        text_dim=128,
        text_layers=2,
        snapshot_every=1000,
        eval_every=250,
        eval_samples=64,
        toggles=Toggles(concept_predictor=with_predictor),
        base_init=str(base_path),
        dataset_root=str(dataset_dir),
    )
    trainer = Trainer(registry, config, out_dir)
    final = trainer.train()
    (out_dir / "accuracy_history.json").write_text(json.dumps(trainer.accuracy_history))
    return final


@pytest.fixture(scope="session")
def e2e_runs(toy_dataset_dir):
    """Train the full method and the no-predictor ablation once per session.

    Returns a dict with the dataset dir and both run directories.  Results are
    cached on disk keyed by the schedule constants.
    """
    from partcomposer.trainer import TrainConfig, pretrain_toy_base

    tag = f"s{E2E_SEED}_p{E2E_PRETRAIN_STEPS}_{E2E_STAGE1_STEPS}_{E2E_STAGE2_STEPS}"
    cache = CACHE_ROOT / tag
    marker = cache / "DONE"
    dataset_dir = cache / "data"
    if not marker.exists():
        cache.mkdir(parents=True, exist_ok=True)
        generate_toy_dataset(E2E_SPEC, dataset_dir)
        registry = load_registry(dataset_dir)
        base_cfg = TrainConfig(
            seed=E2E_SEED, resolution=64, timesteps=1000,
            unet_base=32, text_dim=128, text_layers=2,
        )
        base_path = cache / "toy_base.pt"
        pretrain_toy_base(registry, base_cfg, E2E_PRETRAIN_STEPS, base_path, lr=2e-3)
        _train_e2e_variant(dataset_dir, cache / "full", base_path, with_predictor=True)
        _train_e2e_variant(dataset_dir, cache / "ablated", base_path, with_predictor=False)
        marker.write_text("ok")
    return {
        "dataset": dataset_dir,
        "full": cache / "full",
        "ablated": cache / "ablated",
        "snapshots": sorted((cache / "full").glob("step_*")),
    }
