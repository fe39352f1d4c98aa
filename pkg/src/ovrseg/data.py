"""Dataset manifests, sample loading, tiling, and synthetic data generation.

A dataset is a directory with a JSON manifest describing ordered classes with
seen flags, prompt templates, a normalization record, and image/mask path
pairs. Masks are single-channel 8-bit images holding class indices, with 255
marking ignored pixels. The synthetic generator draws constant-color,
grid-aligned rectangles on a textured background so the pipeline can overfit
it quickly in tests.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from PIL import Image

from .registry import IGNORE_INDEX, REMOTE_SENSING_TEMPLATES, ClassRegistry


@dataclass(frozen=True)
class ClassEntry:
    name: str
    seen: bool


@dataclass
class DatasetManifest:
    name: str
    classes: list[ClassEntry]
    samples: list[dict[str, str]] = field(default_factory=list)  # {"image": ..., "mask": ...}
    templates: tuple[str, ...] = REMOTE_SENSING_TEMPLATES
    ignore_index: int = IGNORE_INDEX
    tile_px: int = 256
    normalization: dict[str, list[float]] = field(
        default_factory=lambda: {"mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]}
    )
    root: str = ""  # directory sample paths are relative to; not serialized

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValueError("manifest needs at least one class")
        if self.ignore_index < len(self.classes):
            raise ValueError("ignore_index collides with a class index")
        for rec in self.samples:
            if "image" not in rec or "mask" not in rec:
                raise ValueError("every sample record needs image and mask paths")

    def registry(self) -> ClassRegistry:
        return ClassRegistry(
            names=tuple(c.name for c in self.classes),
            seen_flags=tuple(c.seen for c in self.classes),
            templates=tuple(self.templates),
        )

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        d["templates"] = list(self.templates)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def parse_manifest(text: str, root: str = "") -> DatasetManifest:
    d = json.loads(text)
    known = {"name", "classes", "samples", "templates", "ignore_index", "tile_px",
             "normalization"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
    return DatasetManifest(
        name=d["name"],
        classes=[ClassEntry(**c) for c in d["classes"]],
        samples=list(d.get("samples", [])),
        templates=tuple(d.get("templates", REMOTE_SENSING_TEMPLATES)),
        ignore_index=int(d.get("ignore_index", IGNORE_INDEX)),
        tile_px=int(d.get("tile_px", 256)),
        normalization=d.get("normalization", {"mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]}),
        root=root,
    )


def load_manifest(path: str) -> DatasetManifest:
    with open(path, encoding="utf-8") as f:
        return parse_manifest(f.read(), root=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(manifest.to_json())


# Table-style benchmark splits, shipped so configs can name them directly.
PRESET_SPLITS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "isaid": (
        ("ship", "storage tank", "baseball diamond", "basketball court",
         "ground track field", "large vehicle", "swimming pool", "roundabout", "plane"),
        ("tennis court", "bridge", "small vehicle", "helicopter",
         "soccer ball field", "harbor"),
    ),
    "dlrsd": (
        ("chaparral", "court", "dock", "field", "grass", "mobile home",
         "sand", "ship", "tanks", "water"),
        ("airplane", "bare soil", "buildings", "cars", "pavement", "sea", "trees"),
    ),
    "oem": (
        ("bareland", "rangeland", "road", "building"),
        ("developed space", "tree", "water", "agriculture land"),
    ),
}


def preset_registry(name: str) -> ClassRegistry:
    key = name.lower()
    if key not in PRESET_SPLITS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESET_SPLITS)}")
    seen, unseen = PRESET_SPLITS[key]
    return ClassRegistry(
        names=seen + unseen,
        seen_flags=(True,) * len(seen) + (False,) * len(unseen),
    )


def _read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise ValueError(f"unreadable image {path!r}: {e}") from e


def _read_mask(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                im = im.convert("L")
            return np.asarray(im, dtype=np.uint8)
    except OSError as e:
        raise ValueError(f"unreadable mask {path!r}: {e}") from e


def load_sample(manifest: DatasetManifest, index: int,
                phase: str = "eval") -> tuple[torch.Tensor, torch.Tensor]:
    """Load one normalized image and its mask.

    In the train phase, pixels labeled with unseen classes are remapped to the
    ignore index so no gradient flows from them; eval masks pass through
    untouched.
    """
    if phase not in ("train", "eval"):
        raise ValueError(f"unknown phase {phase!r}")
    rec = manifest.samples[index]
    img = _read_image(os.path.join(manifest.root, rec["image"]))
    raw_mask = _read_mask(os.path.join(manifest.root, rec["mask"]))
    if img.shape[:2] != raw_mask.shape:
        raise ValueError(f"sample {index}: image and mask sizes differ")
    n_c = len(manifest.classes)
    bad = raw_mask[(raw_mask >= n_c) & (raw_mask != manifest.ignore_index)]
    if bad.size:
        raise ValueError(
            f"sample {index}: mask value {int(bad.max())} outside {n_c} classes "
            f"and ignore index {manifest.ignore_index}"
        )
    mask = raw_mask.astype(np.int64)
    if phase == "train":
        for c, entry in enumerate(manifest.classes):
            if not entry.seen:
                mask[mask == c] = manifest.ignore_index
    mean = np.asarray(manifest.normalization["mean"], dtype=np.float32)
    std = np.asarray(manifest.normalization["std"], dtype=np.float32)
    image = (img.astype(np.float32) / 255.0 - mean) / std
    return torch.from_numpy(image), torch.from_numpy(mask)


def reindex_mask_to_subset(mask: torch.Tensor, registry: ClassRegistry,
                           subset: ClassRegistry) -> torch.Tensor:
    """Map class indices of a full registry onto a sub-registry's indices.

    Classes absent from the subset become the ignore index. Used to present
    train-phase masks to a model built over the seen classes only.
    """
    lut = torch.full((registry.n_classes,), IGNORE_INDEX, dtype=torch.int64)
    for new_idx, name in enumerate(subset.names):
        lut[registry.index_of(name)] = new_idx
    out = mask.clone()
    labeled = mask != IGNORE_INDEX
    out[labeled] = lut[mask[labeled]]
    return out


def tile(image: torch.Tensor, mask: torch.Tensor,
         tile_px: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Cut aligned non-overlapping tiles; right/bottom remainders are dropped."""
    if image.shape[:2] != mask.shape:
        raise ValueError("image and mask are not aligned")
    h, w = mask.shape
    if h < tile_px or w < tile_px:
        raise ValueError(f"source {h}x{w} smaller than tile size {tile_px}")
    tiles = []
    for i in range(h // tile_px):
        for j in range(w // tile_px):
            rs = slice(i * tile_px, (i + 1) * tile_px)
            cs = slice(j * tile_px, (j + 1) * tile_px)
            tiles.append((image[rs, cs], mask[rs, cs]))
    return tiles


@dataclass
class SyntheticSpec:
    seed: int = 0
    image_px: int = 64
    n_classes: int = 4
    n_images: int = 8
    shapes_per_image: int = 3
    noise: float = 0.03
    n_unseen: int = 1
    align_px: int = 8

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need a background class plus at least one shape class")
        if not 1 <= self.n_unseen < self.n_classes:
            raise ValueError("unseen count must leave at least one seen class")
        if self.image_px % self.align_px != 0:
            raise ValueError("image size must be a multiple of the alignment grid")


_PALETTE = (
    (220, 40, 40), (40, 180, 60), (50, 80, 220), (230, 200, 40),
    (180, 60, 200), (40, 200, 200), (240, 130, 30), (130, 90, 50),
    (90, 200, 130), (200, 90, 130), (90, 130, 220), (160, 160, 60),
)

_COLOR_WORDS = (
    "red", "green", "blue", "yellow", "purple", "cyan",
    "orange", "brown", "mint", "pink", "cornflower", "olive",
)


def synthetic_class_names(n_classes: int) -> list[str]:
    if n_classes - 1 > len(_COLOR_WORDS):
        raise ValueError(f"at most {len(_COLOR_WORDS) + 1} synthetic classes supported")
    return ["background"] + [f"{_COLOR_WORDS[i]} block" for i in range(n_classes - 1)]


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> str:
    """Write a synthetic dataset under out_dir; returns the manifest path.

    Shapes are axis-aligned rectangles with constant colors, aligned to the
    patch grid; the background is gray with uniform noise. The last n_unseen
    classes are flagged unseen. Generation is deterministic for a seed, and
    every class appears in at least one mask.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    names = synthetic_class_names(spec.n_classes)
    n_shape_classes = spec.n_classes - 1
    s, a = spec.image_px, spec.align_px
    cells = s // a
    samples = []
    for i in range(spec.n_images):
        img = np.full((s, s, 3), 128.0, dtype=np.float64)
        img += rng.uniform(-spec.noise * 255.0, spec.noise * 255.0, size=(s, s, 3))
        mask = np.zeros((s, s), dtype=np.uint8)
        # cycled class drawn last so it is never painted over: with
        # n_images >= shape classes every class survives in some mask
        classes = [(i + k) % n_shape_classes + 1 for k in range(spec.shapes_per_image)][::-1]
        for c in classes:
            max_cells = max(1, cells // 2)
            ch = int(rng.integers(1, max_cells + 1))
            cw = int(rng.integers(1, max_cells + 1))
            r0 = int(rng.integers(0, cells - ch + 1)) * a
            c0 = int(rng.integers(0, cells - cw + 1)) * a
            rs, cs = slice(r0, r0 + ch * a), slice(c0, c0 + cw * a)
            img[rs, cs] = np.asarray(_PALETTE[c - 1], dtype=np.float64)
            mask[rs, cs] = c
        image_rel = f"images/{i:04d}.png"
        mask_rel = f"masks/{i:04d}.png"
        Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(os.path.join(out_dir, image_rel))
        Image.fromarray(mask, mode="L").save(os.path.join(out_dir, mask_rel))
        samples.append({"image": image_rel, "mask": mask_rel})
    manifest = DatasetManifest(
        name="synthetic",
        classes=[ClassEntry(nm, seen=(idx < spec.n_classes - spec.n_unseen))
                 for idx, nm in enumerate(names)],
        samples=samples,
        tile_px=spec.image_px,
        root=out_dir,
    )
    path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest, path)
    return path
