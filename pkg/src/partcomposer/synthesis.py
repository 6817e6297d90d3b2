"""Dynamic training-batch synthesis: masked instance images and part collages.

Every training batch pairs an *instance* sample (one source example with a
random non-empty subset of its parts kept, everything else whitened) with a
*collage* sample (one part per slot drawn across examples, randomly scaled
and placed on a white canvas, later placements occluding earlier ones).

All randomness comes from a caller-supplied ``numpy.random.Generator`` so
samples are reproducible and workers can be seeded independently.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .registry import ConceptRegistry, ExampleImage

logger = logging.getLogger(__name__)

WHITE = 255

INSTANCE_TEMPLATE = "A photo of a partial {category} composed of: {tokens}, on a clean white background."
COLLAGE_TEMPLATE = "A photo of randomly placed {category} components: {tokens}, on a clean white background."
INFERENCE_TEMPLATE = "A photo of a partial {category} with {tokens}, on a clean white background."
BACKGROUND_SUFFIX = "in {background}."

PLACEHOLDER_RE = re.compile(r"<v\d+>|<bg\d+>")


@dataclass
class SynthesisConfig:
    """Knobs for sample generation. Canvas size tracks the training resolution."""

    canvas_size: int = 512
    scale_range: tuple[float, float] = (0.6, 1.1)
    use_backgrounds: bool = False  # paste onto the example's background instead of white


@dataclass
class SynthesizedSample:
    """One training image with per-concept exclusive masks and its concept code."""

    image: np.ndarray  # uint8, HxWx3
    part_masks: dict[str, np.ndarray]  # token -> bool HxW, pairwise disjoint
    concept_code: np.ndarray  # uint8 multi-hot over all part tokens, registry order
    prompt: str
    kind: str  # "instance" | "collage"
    source_example_id: str | None = None
    background_token: str | None = None
    # Collages record their pre-occlusion stamps in placement order so the
    # occlusion result can be cross-checked independently.
    placements: list[tuple[str, np.ndarray]] | None = None
    union_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        h, w = self.image.shape[:2]
        union = np.zeros((h, w), dtype=bool)
        for mask in self.part_masks.values():
            union |= mask
        self.union_mask = union

    @property
    def tokens(self) -> list[str]:
        return list(self.part_masks.keys())


def build_prompt(
    kind: str, category: str, tokens: list[str], background_token: str | None = None
) -> str:
    """Render the training prompt for a sample kind.

    Tokens must already be ordered ascending by index. With an active
    background token the trailing white-background clause is replaced by
    ``in <bgX>.``.
    """
    if not tokens:
        raise ValueError("prompt requires at least one concept token")
    if kind == "instance":
        template = INSTANCE_TEMPLATE
    elif kind == "collage":
        template = COLLAGE_TEMPLATE
    else:
        raise ValueError(f"unknown sample kind {kind!r}")
    prompt = template.format(category=category, tokens=", ".join(tokens))
    if background_token:
        prompt = prompt.replace(
            "on a clean white background.", BACKGROUND_SUFFIX.format(background=background_token)
        )
    return prompt


def build_inference_prompt(
    category: str, tokens: list[str], background_token: str | None = None
) -> str:
    """Render the composition prompt used at sampling time."""
    if not tokens:
        raise ValueError("prompt requires at least one concept token")
    prompt = INFERENCE_TEMPLATE.format(category=category, tokens=", ".join(tokens))
    if background_token:
        prompt = prompt.replace(
            "on a clean white background.", BACKGROUND_SUFFIX.format(background=background_token)
        )
    return prompt


def parse_prompt_tokens(prompt: str) -> list[str]:
    """Extract placeholder tokens from a prompt, in order of appearance."""
    return PLACEHOLDER_RE.findall(prompt)


def _token_sort_key(token: str) -> int:
    return int(re.search(r"\d+", token).group())


def _concept_code(registry: ConceptRegistry, tokens: list[str]) -> np.ndarray:
    code = np.zeros(len(registry.part_tokens), dtype=np.uint8)
    for tok in tokens:
        code[registry.token_index(tok)] = 1
    return code


def _resize_to_canvas(example: ExampleImage, size: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Example image and exclusive masks at canvas resolution (nearest for masks)."""
    image = example.image
    masks = example.exclusive_masks()
    if image.shape[0] != size or image.shape[1] != size:
        image = np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))
        masks = {
            tok: np.asarray(
                Image.fromarray(m.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)
            )
            > 127
            for tok, m in masks.items()
        }
    return image, masks


def sample_instance(
    registry: ConceptRegistry,
    rng: np.random.Generator,
    config: SynthesisConfig | None = None,
) -> SynthesizedSample:
    """Pick one example uniformly and keep a uniform non-empty subset of its parts.

    Pixels outside the kept parts' masks are whitened (or replaced by the
    example's background image when backgrounds are in use).
    """
    config = config or SynthesisConfig()
    example = registry.examples[int(rng.integers(registry.m))]
    k = len(example.parts)
    # rng.integers(1, 2**k) is uniform over the 2^k - 1 non-empty subsets.
    bits = int(rng.integers(1, 2**k))
    selected = [example.parts[j].token for j in range(k) if bits >> j & 1]

    image, excl = _resize_to_canvas(example, config.canvas_size)
    part_masks = {tok: excl[tok] for tok in selected if excl[tok].any()}
    union = np.zeros(image.shape[:2], dtype=bool)
    for m in part_masks.values():
        union |= m

    bg_token = example.background_token if config.use_backgrounds else None
    if bg_token is not None and example.background_image is not None:
        canvas = np.asarray(
            Image.fromarray(example.background_image).resize(
                (config.canvas_size, config.canvas_size), Image.BILINEAR
            )
        ).copy()
    else:
        bg_token = None
        canvas = np.full_like(image, WHITE)
    canvas[union] = image[union]

    tokens = sorted(part_masks.keys(), key=_token_sort_key)
    return SynthesizedSample(
        image=canvas,
        part_masks={tok: part_masks[tok] for tok in tokens},
        concept_code=_concept_code(registry, tokens),
        prompt=build_prompt("instance", example.category, tokens, bg_token),
        kind="instance",
        source_example_id=example.example_id,
        background_token=bg_token,
    )


def _scaled_part_crop(
    example: ExampleImage, slot_index: int, canvas: int, scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Crop a part to its bbox and rescale it (nearest-neighbor keeps masks binary)."""
    image, excl = _resize_to_canvas(example, canvas)
    token = example.parts[slot_index].token
    mask = excl[token]
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = image[y0:y1, x0:x1]
    crop_mask = mask[y0:y1, x0:x1]

    h = max(1, round(crop.shape[0] * scale))
    w = max(1, round(crop.shape[1] * scale))
    if h > canvas or w > canvas:
        shrink = min(canvas / h, canvas / w)
        h, w = max(1, int(h * shrink)), max(1, int(w * shrink))
        logger.warning(
            "part %s scaled beyond canvas; rescaled to fit (%dx%d)", token, h, w
        )
    crop = np.asarray(Image.fromarray(crop).resize((w, h), Image.NEAREST))
    crop_mask = (
        np.asarray(Image.fromarray(crop_mask.astype(np.uint8) * 255).resize((w, h), Image.NEAREST))
        > 127
    )
    return crop, crop_mask


def sample_collage(
    registry: ConceptRegistry,
    rng: np.random.Generator,
    config: SynthesisConfig | None = None,
) -> SynthesizedSample:
    """Synthesize a collage: one part per slot, drawn uniformly across examples,
    randomly scaled and placed on a white canvas.

    Slots are placed in a shuffled order; later placements occlude earlier
    ones and the earlier masks are trimmed accordingly.  Parts whose mask is
    fully occluded are dropped from the concept code and the prompt.
    """
    config = config or SynthesisConfig()
    k = registry.k
    size = config.canvas_size
    canvas = np.full((size, size, 3), WHITE, dtype=np.uint8)

    order = rng.permutation(k)
    placed: list[tuple[str, np.ndarray]] = []  # placement order, trimmed in place
    stamps: list[tuple[str, np.ndarray]] = []  # placement order, pre-occlusion
    for slot_index in order:
        example = registry.examples[int(rng.integers(registry.m))]
        token = example.parts[slot_index].token
        scale = float(rng.uniform(*config.scale_range))
        crop, crop_mask = _scaled_part_crop(example, int(slot_index), size, scale)
        h, w = crop_mask.shape
        y = int(rng.integers(0, size - h + 1))
        x = int(rng.integers(0, size - w + 1))

        full = np.zeros((size, size), dtype=bool)
        full[y : y + h, x : x + w] = crop_mask
        region = canvas[y : y + h, x : x + w]
        region[crop_mask] = crop[crop_mask]
        for _, earlier in placed:
            earlier &= ~full
        placed.append((token, full))
        stamps.append((token, full.copy()))

    # The last-placed part is never occluded, so at least one token survives.
    visible = {tok: m for tok, m in placed if m.any()}
    tokens = sorted(visible.keys(), key=_token_sort_key)
    return SynthesizedSample(
        image=canvas,
        part_masks={tok: visible[tok] for tok in tokens},
        concept_code=_concept_code(registry, tokens),
        prompt=build_prompt("collage", registry.category, tokens),
        kind="collage",
        source_example_id=None,
        background_token=None,
        placements=stamps,
    )


def make_batch(
    registry: ConceptRegistry,
    rng: np.random.Generator,
    config: SynthesisConfig | None = None,
    dynamic: bool = True,
) -> tuple[SynthesizedSample, SynthesizedSample]:
    """One training batch: (instance, collage), or (instance, instance) when
    dynamic synthesis is ablated."""
    first = sample_instance(registry, rng, config)
    if dynamic:
        second = sample_collage(registry, rng, config)
    else:
        second = sample_instance(registry, rng, config)
    return first, second
