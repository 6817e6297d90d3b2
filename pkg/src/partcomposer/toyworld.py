"""Procedural desk-scale datasets with exact part masks.

Each generated example is a flat-color "object" whose parts are simple
geometric shapes laid out in non-overlapping cells.  Every part across the
whole dataset gets its own color, so part identity in a generated image can
be checked offline by color matching instead of a learned scorer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .registry import ConceptRegistry

# Well-separated flat colors (pairwise Euclidean distance >= 60 in 0..255 space).
DEFAULT_PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75),    # red
    (60, 180, 75),    # green
    (0, 130, 200),    # blue
    (255, 225, 25),   # yellow
    (145, 30, 180),   # purple
    (70, 240, 240),   # cyan
    (240, 50, 230),   # magenta
    (245, 130, 48),   # orange
    (0, 0, 128),      # navy
    (154, 99, 36),    # brown
    (0, 100, 60),     # dark green
    (128, 128, 128),  # gray
    (255, 160, 160),  # salmon
    (100, 0, 40),     # maroon
    (40, 40, 40),     # near-black
    (190, 255, 140),  # mint
)

MIN_COLOR_SEPARATION = 60.0  # Euclidean, 0..255 per channel


@dataclass
class ToySpec:
    """Parameters for a procedural dataset."""

    num_examples: int = 2
    parts_per_example: int = 4
    canvas: int = 64
    layout_seed: int = 0
    category: str = "object"
    palette: tuple[tuple[int, int, int], ...] = DEFAULT_PALETTE

    def __post_init__(self):
        colors = np.asarray(self.palette, dtype=np.float64)
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                d = float(np.linalg.norm(colors[i] - colors[j]))
                if d < MIN_COLOR_SEPARATION:
                    raise ValueError(
                        f"palette colors {i} and {j} are only {d:.1f} apart "
                        f"(minimum {MIN_COLOR_SEPARATION})"
                    )


@dataclass
class SlotReport:
    slot_name: str
    token: str
    hit: bool
    matched_area_fraction: float  # largest matching component, fraction of canvas
    expected_area_fraction: float  # source part area, fraction of source canvas


@dataclass
class FidelityReport:
    slots: list[SlotReport]
    hit_rate: float = field(init=False)

    def __post_init__(self):
        self.hit_rate = (
            sum(s.hit for s in self.slots) / len(self.slots) if self.slots else 0.0
        )


def _cell_grid(n: int) -> tuple[int, int]:
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    return rows, cols


def _draw_shape(
    rng: np.random.Generator, cell: tuple[int, int, int, int], canvas: int
) -> np.ndarray:
    """Rasterize one random solid shape inside a cell (with margin)."""
    y0, x0, y1, x1 = cell
    h, w = y1 - y0, x1 - x0
    margin_y, margin_x = max(1, h // 8), max(1, w // 8)
    iy0, ix0, iy1, ix1 = y0 + margin_y, x0 + margin_x, y1 - margin_y, x1 - margin_x
    ih, iw = iy1 - iy0, ix1 - ix0

    mask = np.zeros((canvas, canvas), dtype=bool)
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    kind = rng.choice(["rect", "disk", "triangle", "bar"])
    if kind == "rect":
        sh = int(rng.integers(max(3, ih // 2), ih + 1))
        sw = int(rng.integers(max(3, iw // 2), iw + 1))
        oy = iy0 + int(rng.integers(0, ih - sh + 1))
        ox = ix0 + int(rng.integers(0, iw - sw + 1))
        mask[oy : oy + sh, ox : ox + sw] = True
    elif kind == "disk":
        r = int(rng.integers(max(2, min(ih, iw) // 3), min(ih, iw) // 2 + 1))
        cy = iy0 + int(rng.integers(r, ih - r + 1)) if ih > 2 * r else iy0 + ih // 2
        cx = ix0 + int(rng.integers(r, iw - r + 1)) if iw > 2 * r else ix0 + iw // 2
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    elif kind == "triangle":
        # Upright isoceles triangle filling the inner cell.
        apex_x = ix0 + iw // 2
        rel_y = (yy - iy0) / max(1, ih - 1)
        half_width = rel_y * (iw / 2)
        mask = (yy >= iy0) & (yy < iy1) & (np.abs(xx - apex_x) <= half_width)
    else:  # bar
        horizontal = bool(rng.integers(0, 2))
        if horizontal:
            t = max(2, ih // 3)
            oy = iy0 + int(rng.integers(0, ih - t + 1))
            mask[oy : oy + t, ix0:ix1] = True
        else:
            t = max(2, iw // 3)
            ox = ix0 + int(rng.integers(0, iw - t + 1))
            mask[iy0:iy1, ox : ox + t] = True
    return mask


def generate_toy_dataset(spec: ToySpec, out_dir: str | Path) -> Path:
    """Write a dataset in the registry on-disk format and return its root.

    Deterministic in ``spec.layout_seed``; each part's color is unique across
    all examples; per example, part masks exactly partition the non-white
    region.
    """
    need = spec.num_examples * spec.parts_per_example
    if need > len(spec.palette):
        raise ValueError(
            f"palette has {len(spec.palette)} colors but "
            f"{spec.num_examples} x {spec.parts_per_example} = {need} parts need unique colors"
        )
    rng = np.random.default_rng(spec.layout_seed)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    rows, cols = _cell_grid(spec.parts_per_example)
    ch, cw = spec.canvas // rows, spec.canvas // cols

    color_iter = iter(spec.palette)
    for i in range(spec.num_examples):
        ex_dir = root / f"example_{i + 1:02d}"
        (ex_dir / "parts").mkdir(parents=True, exist_ok=True)
        image = np.full((spec.canvas, spec.canvas, 3), 255, dtype=np.uint8)

        # Shuffle which part occupies which cell so layouts differ per example.
        cell_order = rng.permutation(spec.parts_per_example)
        manifest_parts = []
        for j in range(spec.parts_per_example):
            cell_idx = int(cell_order[j])
            r, c = divmod(cell_idx, cols)
            cell = (r * ch, c * cw, (r + 1) * ch, (c + 1) * cw)
            mask = _draw_shape(rng, cell, spec.canvas)
            color = next(color_iter)
            image[mask] = color
            slot = f"part{j + 1}"
            Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(
                ex_dir / "parts" / f"{slot}.png"
            )
            manifest_parts.append({"name": slot, "mask": f"{slot}.png"})

        Image.fromarray(image).save(ex_dir / "image.png")
        (ex_dir / "manifest.json").write_text(
            json.dumps({"category": spec.category, "parts": manifest_parts}, indent=2)
        )
    return root


def part_color(registry: ConceptRegistry, token: str) -> np.ndarray:
    """Mean RGB of a part's pixels in its source image (exact for flat colors)."""
    asset = registry.lookup(token)
    example = registry.example(asset.example_id)
    return example.image[asset.mask].mean(axis=0)


def check_composition_fidelity(
    image: np.ndarray,
    selections: dict[str, str],
    registry: ConceptRegistry,
    color_tolerance: float = 40.0,
    area_fraction: float = 0.3,
) -> FidelityReport:
    """Score how many selected parts appear in a generated image.

    A slot counts as a hit when the image contains a connected region whose
    color lies within ``color_tolerance`` (Euclidean, inclusive) of the
    part's source color and whose area is at least ``area_fraction`` of the
    part's source relative area.  Matching is by color and area only, so the
    check is invariant to where the part ended up.
    """
    img = image.astype(np.float64)
    canvas_pixels = img.shape[0] * img.shape[1]
    slots: list[SlotReport] = []
    for slot_name, token in selections.items():
        asset = registry.lookup(token)
        example = registry.example(asset.example_id)
        color = part_color(registry, token)
        expected_frac = asset.area / (example.image.shape[0] * example.image.shape[1])

        dist = np.linalg.norm(img - color, axis=-1)
        near = dist <= color_tolerance
        labels, n = ndimage.label(near, structure=np.ones((3, 3), dtype=int))
        largest = 0
        if n > 0:
            largest = int(np.bincount(labels.ravel())[1:].max())
        matched_frac = largest / canvas_pixels
        slots.append(
            SlotReport(
                slot_name=slot_name,
                token=token,
                hit=matched_frac >= area_fraction * expected_frac,
                matched_area_fraction=matched_frac,
                expected_area_fraction=expected_frac,
            )
        )
    return FidelityReport(slots=slots)
