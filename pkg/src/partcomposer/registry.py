"""Concept registry: single-image examples, part masks, and placeholder tokens.

Datasets live on disk as one directory per example:

    <root>/<example_id>/image.png           RGB example image
    <root>/<example_id>/parts/<slot>.png    8-bit grayscale mask, foreground = value > 127
    <root>/<example_id>/manifest.json       {"category": ..., "parts": [{"name", "mask"}, ...],
                                             "background": optional image filename}

Examples are loaded in sorted directory order and parts in manifest order, so
token assignment is deterministic: example i (1-based), part j (1-based) gets
token ``<v{(i-1)*k + j}>``.  Examples that declare a background image get
``<bg1>``, ``<bg2>``, ... in example order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MASK_FOREGROUND_THRESHOLD = 127  # 8-bit grayscale: foreground = value > 127


class RegistryError(ValueError):
    """Raised when a dataset directory violates the registry contract."""

    def __init__(self, message: str, example_id: str | None = None, slot_name: str | None = None):
        where = ""
        if example_id is not None:
            where = f" [example={example_id}" + (f", slot={slot_name}" if slot_name else "") + "]"
        super().__init__(message + where)
        self.example_id = example_id
        self.slot_name = slot_name


class HeterogeneousSlotsError(RegistryError):
    """Raised when an operation requires a shared slot list but examples disagree."""


@dataclass(frozen=True)
class PartAsset:
    """One part of one example: a named mask region bound to a placeholder token."""

    example_id: str
    slot_name: str
    token: str
    mask: np.ndarray  # bool, HxW, same size as the parent image
    bbox: tuple[int, int, int, int] = field(init=False)  # (x0, y0, x1, y1), exclusive max

    def __post_init__(self):
        ys, xs = np.nonzero(self.mask)
        if ys.size == 0:
            raise RegistryError("part mask has no foreground pixels", self.example_id, self.slot_name)
        object.__setattr__(
            self, "bbox", (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        )

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class ExampleImage:
    """A single-image example with its ordered part decomposition."""

    example_id: str
    image: np.ndarray  # uint8, HxWx3
    category: str
    parts: tuple[PartAsset, ...]
    background_token: str | None = None
    background_image: np.ndarray | None = None

    def __post_init__(self):
        names = [p.slot_name for p in self.parts]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise RegistryError(f"duplicate slot names {dupes}", self.example_id)
        h, w = self.image.shape[:2]
        for p in self.parts:
            if p.mask.shape != (h, w):
                raise RegistryError(
                    f"mask shape {p.mask.shape} does not match image shape {(h, w)}",
                    self.example_id,
                    p.slot_name,
                )

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(p.slot_name for p in self.parts)

    def exclusive_masks(self) -> dict[str, np.ndarray]:
        """Per-token masks with overlaps resolved: a pixel claimed by several
        parts belongs to the later-listed one."""
        claimed = np.zeros(self.image.shape[:2], dtype=bool)
        out: dict[str, np.ndarray] = {}
        for part in reversed(self.parts):
            mine = part.mask & ~claimed
            claimed |= part.mask
            out[part.token] = mine
        return {p.token: out[p.token] for p in self.parts}


@dataclass(frozen=True)
class ConceptRegistry:
    """All loaded examples plus the bidirectional token table."""

    examples: tuple[ExampleImage, ...]

    def __post_init__(self):
        tokens = [p.token for ex in self.examples for p in ex.parts]
        tokens += [ex.background_token for ex in self.examples if ex.background_token]
        if len(set(tokens)) != len(tokens):
            raise RegistryError("tokens are not unique across the registry")

    @property
    def m(self) -> int:
        return len(self.examples)

    @property
    def k(self) -> int:
        """Parts per example. Raises when examples disagree."""
        counts = {len(ex.parts) for ex in self.examples}
        if len(counts) != 1:
            raise HeterogeneousSlotsError(
                f"examples have differing part counts {sorted(counts)}; "
                "cross-category composition must select tokens explicitly"
            )
        return counts.pop()

    @property
    def part_tokens(self) -> tuple[str, ...]:
        """All part tokens in assignment order (background tokens excluded)."""
        return tuple(p.token for ex in self.examples for p in ex.parts)

    @property
    def background_tokens(self) -> tuple[str, ...]:
        return tuple(ex.background_token for ex in self.examples if ex.background_token)

    @property
    def token_table(self) -> dict[str, tuple[str, str]]:
        return {p.token: (ex.example_id, p.slot_name) for ex in self.examples for p in ex.parts}

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(ex.category for ex in self.examples))

    @property
    def category(self) -> str:
        """Shared category word, or 'object' for mixed-category registries."""
        cats = self.categories
        return cats[0] if len(cats) == 1 else "object"

    def lookup(self, token: str) -> PartAsset:
        for ex in self.examples:
            for p in ex.parts:
                if p.token == token:
                    return p
        raise KeyError(f"unknown token {token!r}")

    def example(self, example_id: str) -> ExampleImage:
        for ex in self.examples:
            if ex.example_id == example_id:
                return ex
        raise KeyError(f"unknown example {example_id!r}")

    def token_index(self, token: str) -> int:
        """0-based index of a part token in assignment order."""
        return self.part_tokens.index(token)

    def shared_slot_names(self) -> tuple[str, ...]:
        names = {ex.slot_names for ex in self.examples}
        if len(names) != 1:
            raise HeterogeneousSlotsError(
                "examples do not share an ordered slot list; "
                "use composition_space(..., match_by='order') for cross-category runs"
            )
        return names.pop()


def _load_mask(path: Path, example_id: str, slot_name: str) -> np.ndarray:
    if not path.exists():
        raise RegistryError(f"missing mask file {path.name}", example_id, slot_name)
    raw = np.asarray(Image.open(path).convert("L"))
    return raw > MASK_FOREGROUND_THRESHOLD


def load_registry(dataset_root: str | Path) -> ConceptRegistry:
    """Load every example directory under ``dataset_root`` and assign tokens.

    Loading is deterministic: directories are visited in sorted order and
    parts in manifest order, so two loads of the same tree produce identical
    registries.
    """
    root = Path(dataset_root)
    example_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not example_dirs:
        raise RegistryError(f"no example directories under {root}")

    examples: list[ExampleImage] = []
    token_counter = 0
    bg_counter = 0
    for ex_dir in example_dirs:
        example_id = ex_dir.name
        manifest_path = ex_dir / "manifest.json"
        if not manifest_path.exists():
            raise RegistryError("missing manifest.json", example_id)
        manifest = json.loads(manifest_path.read_text())

        image_path = ex_dir / "image.png"
        if not image_path.exists():
            raise RegistryError("missing image.png", example_id)
        image = np.asarray(Image.open(image_path).convert("RGB"))

        parts: list[PartAsset] = []
        for entry in manifest["parts"]:
            slot = entry["name"]
            mask_name = entry.get("mask", f"{slot}.png")
            mask = _load_mask(ex_dir / "parts" / mask_name, example_id, slot)
            if mask.shape != image.shape[:2]:
                raise RegistryError(
                    f"mask size {mask.shape} does not match image size {image.shape[:2]}",
                    example_id,
                    slot,
                )
            token_counter += 1
            parts.append(
                PartAsset(example_id=example_id, slot_name=slot, token=f"<v{token_counter}>", mask=mask)
            )

        background_token = None
        background_image = None
        if manifest.get("background"):
            bg_path = ex_dir / manifest["background"]
            if not bg_path.exists():
                raise RegistryError(f"missing background image {manifest['background']}", example_id)
            bg_counter += 1
            background_token = f"<bg{bg_counter}>"
            background_image = np.asarray(Image.open(bg_path).convert("RGB"))

        examples.append(
            ExampleImage(
                example_id=example_id,
                image=image,
                category=manifest["category"],
                parts=tuple(parts),
                background_token=background_token,
                background_image=background_image,
            )
        )

    return ConceptRegistry(examples=tuple(examples))


def composition_space(
    registry: ConceptRegistry, match_by: str = "name"
) -> list[dict[str, str]]:
    """Enumerate all m^k ways of filling each slot with one example's part.

    Selections are ordered lexicographically: the first slot's example index
    varies slowest.  ``match_by='name'`` requires every example to share the
    same ordered slot list; ``match_by='order'`` pairs slots positionally
    (cross-category runs) and labels them with the first example's slot names.
    """
    if match_by not in ("name", "order"):
        raise ValueError(f"match_by must be 'name' or 'order', got {match_by!r}")
    k = registry.k  # raises HeterogeneousSlotsError on differing part counts
    if match_by == "name":
        slot_names = registry.shared_slot_names()
    else:
        slot_names = registry.examples[0].slot_names

    selections = []
    for choice in itertools.product(range(registry.m), repeat=k):
        selections.append(
            {slot_names[j]: registry.examples[choice[j]].parts[j].token for j in range(k)}
        )
    return selections
