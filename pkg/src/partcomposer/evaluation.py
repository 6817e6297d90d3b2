"""Evaluation protocol: preservation scoring, FID/KID, segmentation
convergence visualization, and the full sampling protocol over the
composition space.

Feature extraction for FID/KID is injected (any image -> vector callable);
the metrics themselves are extractor-parametric.  Preservation scoring talks
to a multimodal scoring endpoint through a small client interface with an
offline mock for tests.
"""

from __future__ import annotations

import io
import json
import os
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
from PIL import Image
from scipy import linalg

from .backend.sampler import ddim_sample
from .backend.schedule import forward_process, one_step_denoise
from .checkpoint import CheckpointBundle, load_checkpoint
from .registry import ConceptRegistry, composition_space
from .synthesis import build_inference_prompt

VLM_PROMPT_TEMPLATE = (
    "You are shown a generated image and {k} reference part images. "
    "Count how many reference parts are faithfully preserved in the generated image. "
    "Answer with a single integer 0..{k}."
)

_INT_RE = re.compile(r"-?\d+")


# ---------------------------------------------------------------------------
# Preservation scoring
# ---------------------------------------------------------------------------


@dataclass
class PreservationScore:
    raw: int
    k: int

    @property
    def normalized_fraction(self) -> Fraction:
        return Fraction(self.raw * 5, self.k)

    @property
    def normalized(self) -> float:
        return float(self.normalized_fraction)


class VLMClient(Protocol):
    def score(self, image_png: bytes, reference_pngs: list[bytes], prompt: str) -> str:
        """Return the raw text reply for one scoring request."""


class MockVLMClient:
    """Offline stand-in: replies from a script, or a constant."""

    def __init__(self, replies: list[str] | None = None, constant: int | None = None):
        self.replies = list(replies) if replies is not None else None
        self.constant = constant
        self.calls: list[str] = []

    def score(self, image_png: bytes, reference_pngs: list[bytes], prompt: str) -> str:
        self.calls.append(prompt)
        if self.replies is not None:
            return self.replies.pop(0)
        return str(self.constant)


class HTTPVLMClient:
    """Multipart POST client for an external multimodal scoring endpoint.

    Base URL, model name, and API key come from arguments or the
    PARTCOMPOSER_VLM_URL / PARTCOMPOSER_VLM_MODEL / PARTCOMPOSER_VLM_KEY
    environment variables.
    """

    def __init__(
        self,
        base_url: str | None = None,
        model: str | None = None,
        api_key: str | None = None,
        timeout: float = 60.0,
    ):
        self.base_url = base_url or os.environ.get("PARTCOMPOSER_VLM_URL")
        if not self.base_url:
            raise ValueError("no scoring endpoint configured (PARTCOMPOSER_VLM_URL)")
        self.model = model or os.environ.get("PARTCOMPOSER_VLM_MODEL", "qwen-vl")
        self.api_key = api_key or os.environ.get("PARTCOMPOSER_VLM_KEY")
        self.timeout = timeout

    def score(self, image_png: bytes, reference_pngs: list[bytes], prompt: str) -> str:
        import httpx

        files = [("images", ("generated.png", image_png, "image/png"))]
        for i, ref in enumerate(reference_pngs):
            files.append(("images", (f"reference_{i}.png", ref, "image/png")))
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        response = httpx.post(
            self.base_url,
            data={"prompt": prompt, "model": self.model},
            files=files,
            headers=headers,
            timeout=self.timeout,
        )
        response.raise_for_status()
        return response.text


def parse_score_reply(reply: str, k: int) -> int | None:
    match = _INT_RE.search(reply)
    if not match:
        return None
    value = int(match.group())
    return value if 0 <= value <= k else None


def reference_part_crops(registry: ConceptRegistry, tokens: list[str]) -> list[bytes]:
    """PNG crops of each selected part, cut from its source image by mask bbox."""
    crops = []
    for token in tokens:
        asset = registry.lookup(token)
        example = registry.example(asset.example_id)
        x0, y0, x1, y1 = asset.bbox
        crops.append(_png_bytes(example.image[y0:y1, x0:x1]))
    return crops


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def score_preservation(
    images: list[np.ndarray],
    reference_crops: list[bytes],
    k: int,
    vlm_client: VLMClient,
    retries: int = 2,
) -> list[PreservationScore | None]:
    """Score each generated image 0..k; malformed replies are retried, then
    marked invalid (None)."""
    prompt = VLM_PROMPT_TEMPLATE.format(k=k)
    out: list[PreservationScore | None] = []
    for image in images:
        png = _png_bytes(image)
        raw = None
        for _ in range(retries + 1):
            reply = vlm_client.score(png, reference_crops, prompt)
            raw = parse_score_reply(reply, k)
            if raw is not None:
                break
        out.append(PreservationScore(raw=raw, k=k) if raw is not None else None)
    return out


# ---------------------------------------------------------------------------
# Distribution metrics
# ---------------------------------------------------------------------------


@dataclass
class FeatureSet:
    vectors: np.ndarray  # (N, D)
    source: str = "unknown"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("feature vectors must be a 2-D (N, D) array")
        if self.vectors.shape[0] < 2:
            raise ValueError("metric computation needs at least 2 feature vectors")
        if not np.isfinite(self.vectors).all():
            raise ValueError("feature vectors must be finite")


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3) -> np.ndarray:
    """(x . y / D + 1) ** degree"""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** degree


def unbiased_mmd2(x: np.ndarray, y: np.ndarray, degree: int = 3) -> float:
    """Unbiased squared MMD under the polynomial kernel."""
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD^2 needs at least 2 samples per set")
    k_xx = polynomial_kernel(x, x, degree)
    k_yy = polynomial_kernel(y, y, degree)
    k_xy = polynomial_kernel(x, y, degree)
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    sum_xy = k_xy.sum() / (m * n)
    return float(sum_xx + sum_yy - 2 * sum_xy)


def kid(
    features_a: FeatureSet,
    features_b: FeatureSet,
    batches: int = 20,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean and standard deviation of the per-batch unbiased MMD^2.

    Both sets are shuffled and split into ``batches`` near-equal batches;
    batch i of one set is compared against batch i of the other.
    """
    a, b = features_a.vectors, features_b.vectors
    if a.shape[0] < batches * 2 or b.shape[0] < batches * 2:
        raise ValueError(
            f"need at least {batches * 2} samples per set for {batches} batches"
        )
    rng = np.random.default_rng(seed)
    splits_a = np.array_split(rng.permutation(a.shape[0]), batches)
    splits_b = np.array_split(rng.permutation(b.shape[0]), batches)
    values = [unbiased_mmd2(a[ia], b[ib]) for ia, ib in zip(splits_a, splits_b)]
    return float(np.mean(values)), float(np.std(values))


def fid(
    features_a: FeatureSet,
    features_b: FeatureSet,
    eps: float = 1e-6,
) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    Covariances get ``eps * I`` added before the matrix square root.
    """
    a, b = features_a.vectors, features_b.vectors
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    sigma_a = np.cov(a, rowvar=False).reshape(d, d) + eps * np.eye(d)
    sigma_b = np.cov(b, rowvar=False).reshape(d, d) + eps * np.eye(d)

    covmean, _ = linalg.sqrtm(sigma_a @ sigma_b, disp=False)
    if np.iscomplexobj(covmean):
        if not np.allclose(covmean.imag, 0, atol=1e-3):
            raise ValueError("covariance product is not PSD even after regularization")
        covmean = covmean.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(sigma_a + sigma_b - 2.0 * covmean))


# ---------------------------------------------------------------------------
# Segmentation convergence
# ---------------------------------------------------------------------------


def segmentation_iou(
    bundle: CheckpointBundle,
    probe_image: np.ndarray,
    probe_masks: dict[str, np.ndarray],
    prompt: str,
    t: int | None = None,
    seed: int = 0,
    threshold: float = 0.5,
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Per-concept IoU of thresholded predicted masks against ground truth,
    with a fixed noise draw so checkpoint series are comparable."""
    backbone, predictor = bundle.backbone, bundle.predictor
    t = t or backbone.schedule.num_steps // 2
    with torch.no_grad():
        z0 = backbone.encode_image(probe_image).unsqueeze(0)
        g = torch.Generator().manual_seed(seed)
        eps = torch.randn(z0.shape, generator=g)
        state = forward_process(z0, torch.tensor([t]), eps, backbone.schedule)
        enc = backbone.encode_prompt(prompt)
        eps_hat, _ = backbone.predict_noise(state.z_t, state.t, [enc])
        z_tilde = one_step_denoise(state, eps_hat).z_tilde
        pred = predictor(z_tilde)
        probs = torch.sigmoid(pred.seg_logits[0]).numpy()

    part_tokens = bundle.part_tokens
    ious, rendered = {}, {}
    for token, gt in probe_masks.items():
        channel = probs[part_tokens.index(token)]
        predicted = channel > threshold
        union = np.logical_or(predicted, gt).sum()
        inter = np.logical_and(predicted, gt).sum()
        ious[token] = float(inter / union) if union else 1.0
        rendered[token] = channel
    return ious, rendered


def visualize_segmentation(
    checkpoints: list[str | Path | CheckpointBundle],
    probe_image: np.ndarray,
    probe_masks: dict[str, np.ndarray],
    prompt: str,
    out_path: str | Path | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, list[float]]:
    """Render predicted masks beside ground truth for each checkpoint.

    One row per checkpoint; per concept a predicted-probability panel next to
    the ground-truth panel.  Returns the strip and the mean IoU per
    checkpoint (in the given order).
    """
    rows = []
    mean_ious = []
    for ckpt in checkpoints:
        bundle = ckpt if isinstance(ckpt, CheckpointBundle) else load_checkpoint(ckpt)
        ious, rendered = segmentation_iou(bundle, probe_image, probe_masks, prompt, seed=seed)
        mean_ious.append(float(np.mean(list(ious.values()))))
        panels = []
        for token, gt in probe_masks.items():
            pred_panel = (np.clip(rendered[token], 0, 1) * 255).astype(np.uint8)
            gt_panel = gt.astype(np.uint8) * 255
            panels.extend([pred_panel, gt_panel])
        rows.append(np.concatenate(panels, axis=1))
    strip = np.concatenate(rows, axis=0)
    if out_path is not None:
        Image.fromarray(strip, mode="L").save(out_path)
    return strip, mean_ious


# ---------------------------------------------------------------------------
# Full protocol
# ---------------------------------------------------------------------------


def run_protocol(
    registry: ConceptRegistry,
    checkpoint: str | Path | CheckpointBundle,
    samples_per_combo: int = 36,
    steps: int = 50,
    guidance: float = 7.5,
    seed: int = 0,
    vlm_client: VLMClient | None = None,
    reference_features: FeatureSet | None = None,
    feature_extractor: Callable[[np.ndarray], np.ndarray] | None = None,
    kid_batches: int = 20,
    out_dir: str | Path | None = None,
) -> dict:
    """Sample every part combination, score it, and write a structured report.

    Enumerates the full composition space, draws ``samples_per_combo`` images
    per combination (seeds derived from ``seed``), optionally scores
    preservation through ``vlm_client`` and computes FID/KID of extracted
    features against ``reference_features``.
    """
    bundle = checkpoint if isinstance(checkpoint, CheckpointBundle) else load_checkpoint(checkpoint)
    combos = composition_space(registry)
    out_root = Path(out_dir) if out_dir else None
    if out_root:
        (out_root / "images").mkdir(parents=True, exist_ok=True)

    records = []
    combo_summaries = []
    features = []
    k = registry.k
    for combo_index, selections in enumerate(combos):
        tokens = sorted(selections.values(), key=lambda tok: registry.token_index(tok))
        prompt = build_inference_prompt(registry.category, tokens)
        combo_seed = seed + combo_index * samples_per_combo
        images = ddim_sample(
            bundle.backbone, prompt, steps=steps, guidance_scale=guidance,
            seed=combo_seed, count=samples_per_combo,
        )

        scores: list[PreservationScore | None] = [None] * len(images)
        if vlm_client is not None:
            refs = reference_part_crops(registry, tokens)
            scores = score_preservation(list(images), refs, k, vlm_client)

        combo_records = []
        for i, image in enumerate(images):
            image_id = f"combo{combo_index:03d}_sample{i:03d}"
            record = {
                "image_id": image_id,
                "combo_index": combo_index,
                "selections": selections,
                "prompt": prompt,
                "seed": combo_seed + i,
                "steps": steps,
                "guidance": guidance,
            }
            if scores[i] is not None:
                record["preservation_raw"] = scores[i].raw
                record["preservation_normalized"] = scores[i].normalized
            if out_root:
                path = out_root / "images" / f"{image_id}.png"
                Image.fromarray(image).save(path)
                record["path"] = str(path)
            combo_records.append(record)
            if feature_extractor is not None:
                features.append(np.asarray(feature_extractor(image), dtype=np.float64))
        records.extend(combo_records)

        valid = [s for s in scores if s is not None]
        combo_summaries.append(
            {
                "combo_index": combo_index,
                "selections": selections,
                "prompt": prompt,
                "count": len(combo_records),
                "preservation_mean": (
                    float(np.mean([s.normalized for s in valid])) if valid else None
                ),
            }
        )

    report = {
        "m": registry.m,
        "k": k,
        "samples_per_combo": samples_per_combo,
        "total_images": len(records),
        "combinations": combo_summaries,
        "images": records,
    }
    valid_norms = [r["preservation_normalized"] for r in records if "preservation_normalized" in r]
    if valid_norms:
        report["preservation_mean"] = float(np.mean(valid_norms))
    if reference_features is not None and feature_extractor is not None and features:
        generated = FeatureSet(np.stack(features), source="generated")
        report["fid"] = fid(generated, reference_features)
        kid_mean, kid_std = kid(generated, reference_features, batches=kid_batches, seed=seed)
        report["kid"] = {"mean": kid_mean, "std": kid_std, "batches": kid_batches}

    if out_root:
        (out_root / "report.json").write_text(json.dumps(report, indent=2))
    return report
