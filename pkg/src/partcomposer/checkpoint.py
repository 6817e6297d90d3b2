"""Versioned checkpoint directories with atomic writes.

A checkpoint is a directory holding ``manifest.json`` (version, step/stage,
config snapshot, vocabulary, token table) and ``state.pt`` (model, predictor,
optimizer, and RNG states).  Writes go to a temp directory first and are
renamed into place, so a crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from .backend.text import PromptVocab
from .backend.toy import ToyBackbone, ToyBackboneConfig
from .predictor import ConceptPredictor

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    """Manifest missing, unreadable, or from an incompatible version."""


@dataclass
class CheckpointBundle:
    """A loaded checkpoint: rebuilt modules plus raw manifest/state."""

    backbone: ToyBackbone
    predictor: ConceptPredictor
    manifest: dict
    state: dict
    path: Path

    @property
    def step(self) -> int:
        return self.manifest["step"]

    @property
    def stage(self) -> int:
        return self.manifest["stage"]

    @property
    def part_tokens(self) -> list[str]:
        return list(self.manifest["registry"]["part_tokens"])

    @property
    def category(self) -> str:
        return self.manifest["registry"]["category"]

    @property
    def token_table(self) -> dict[str, list[str]]:
        return self.manifest["registry"]["token_table"]


def save_checkpoint(
    path: str | Path,
    backbone: ToyBackbone,
    predictor: ConceptPredictor,
    manifest_extra: dict[str, Any],
    state_extra: dict[str, Any] | None = None,
) -> Path:
    """Atomically write a checkpoint directory (temp dir + rename)."""
    dst = Path(path)
    dst.parent.mkdir(parents=True, exist_ok=True)

    manifest = {
        "version": CHECKPOINT_VERSION,
        "model": {
            "type": "toy",
            "config": backbone.config.to_dict(),
            "vocab": backbone.vocab.to_dict(),
        },
        "predictor": {
            "num_concepts": predictor.num_concepts,
            "in_channels": predictor.conv1.in_channels,
            "mask_resolution": predictor.mask_resolution,
        },
    }
    manifest.update(manifest_extra)

    state = {
        "model_state": backbone.state_dict(),
        "predictor_state": predictor.state_dict(),
    }
    if state_extra:
        state.update(state_extra)

    tmp = Path(tempfile.mkdtemp(prefix=dst.name + ".tmp-", dir=dst.parent))
    try:
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
        torch.save(state, tmp / "state.pt")
        if dst.exists():
            shutil.rmtree(dst)
        os.replace(tmp, dst)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return dst


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    """Rebuild the backbone and predictor recorded in a checkpoint."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointVersionError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointVersionError(f"unreadable manifest under {root}: {err}") from err
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version!r} is not supported (expected {CHECKPOINT_VERSION})"
        )

    model_info = manifest["model"]
    if model_info["type"] != "toy":
        raise CheckpointError(
            f"backbone type {model_info['type']!r} must be loaded through its own adapter"
        )
    vocab = PromptVocab.from_dict(model_info["vocab"])
    backbone = ToyBackbone(vocab, ToyBackboneConfig.from_dict(model_info["config"]))

    pred_info = manifest["predictor"]
    predictor = ConceptPredictor(
        num_concepts=pred_info["num_concepts"],
        in_channels=pred_info["in_channels"],
        mask_resolution=pred_info["mask_resolution"],
    )

    state = torch.load(root / "state.pt", weights_only=False)
    backbone.load_state_dict(state["model_state"])
    predictor.load_state_dict(state["predictor_state"])
    return CheckpointBundle(
        backbone=backbone, predictor=predictor, manifest=manifest, state=state, path=root
    )
