"""Source corpora: images with per-object segmentation masks.

On disk a corpus is a directory holding the images plus ``index.json``::

    {"instances": [{"image": "images/a.png", "object_id": "a/0",
                    "mask": "masks/a_0.png"},            # or "polygon": [[x, y], ...]
                   ...],
     "images": [{"image": "images/a.png", "background_id": "a"}]}   # optional

The ``images`` list is optional; background ids default to the image stem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import binary_dilation

INDEX_NAME = "index.json"


@dataclass
class ObjectInstance:
    object_id: str
    mask: np.ndarray  # H x W bool

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SourceRecord:
    image_path: str
    background_id: str
    objects: List[ObjectInstance] = field(default_factory=list)
    _image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            with Image.open(self.image_path) as im:
                self._image = np.asarray(im.convert("RGB"))
        return self._image

    def object(self, object_id: str) -> ObjectInstance:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(f"{self.background_id}: no object {object_id!r}")


def rasterize_polygon(points: Sequence[Sequence[float]], shape) -> np.ndarray:
    h, w = shape
    canvas = Image.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).polygon([tuple(map(float, p)) for p in points], fill=1, outline=1)
    return np.asarray(canvas, dtype=bool)


def load_corpus(directory) -> List[SourceRecord]:
    """Read ``index.json`` of a corpus directory into source records (sorted by image path)."""
    root = Path(directory)
    index = json.loads((root / INDEX_NAME).read_text())
    bg_ids: Dict[str, str] = {e["image"]: e["background_id"] for e in index.get("images", [])}
    records: Dict[str, SourceRecord] = {}
    seen = set()
    for inst in index.get("instances", []):
        rel = inst["image"]
        if rel not in records:
            records[rel] = SourceRecord(str(root / rel), bg_ids.get(rel, Path(rel).stem))
        rec = records[rel]
        oid = str(inst["object_id"])
        if oid in seen:
            raise ValueError(f"{root / INDEX_NAME}: duplicate object id {oid!r}")
        seen.add(oid)
        h, w = rec.image.shape[:2]
        if "mask" in inst:
            with Image.open(root / inst["mask"]) as im:
                mask = np.asarray(im.convert("L")) > 0
            if mask.shape != (h, w):
                raise ValueError(f"mask of {oid!r} has shape {mask.shape}, image is {(h, w)}")
        elif "polygon" in inst:
            mask = rasterize_polygon(inst["polygon"], (h, w))
        else:
            raise ValueError(f"instance {oid!r} has neither 'mask' nor 'polygon'")
        rec.objects.append(ObjectInstance(oid, mask))
    for e in index.get("images", []):
        records.setdefault(e["image"], SourceRecord(str(root / e["image"]), e["background_id"]))
    return [records[k] for k in sorted(records)]


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(50, 205, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * (xx - size / 2) + np.sin(theta) * (yy - size / 2)) / size
    img = base[None, None, :] + ramp[..., None] * rng.uniform(-40, 40, size=3)[None, None, :]
    for _ in range(2):
        cx, cy = rng.uniform(0, size, size=2)
        s = rng.uniform(0.15, 0.35) * size
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += blob[..., None] * rng.uniform(-30, 30, size=3)[None, None, :]
    return img


def _random_shape(rng: np.random.Generator, size: int) -> List[List[float]]:
    cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
    rx, ry = rng.uniform(0.08 * size, 0.22 * size, size=2)
    rot = rng.uniform(0, np.pi)
    n = 24
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    wobble = 1 + (rng.uniform(-0.25, 0.25, size=n) if rng.random() < 0.5 else 0)
    x = rx * wobble * np.cos(t)
    y = ry * wobble * np.sin(t)
    px = cx + x * np.cos(rot) - y * np.sin(rot)
    py = cy + x * np.sin(rot) + y * np.cos(rot)
    return [[round(float(a), 2), round(float(b), 2)] for a, b in zip(px, py)]


def make_toy_corpus(directory, n_images: int, seed: int = 0, size: int = 128,
                    objects_per_image: int = 3, noise_sigmas: Optional[Sequence[float]] = None) -> List[SourceRecord]:
    """Write a procedural corpus of smooth scenes with flat-shaded objects.

    Every image gets its own additive Gaussian "sensor" noise level (drawn
    from ``noise_sigmas`` if given, else uniform in [0, 8]), applied after
    the objects are drawn, so pasted objects carry their source's noise.
    """
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    instances, images = [], []
    for i in range(n_images):
        name = f"img_{i:04d}"
        img = _smooth_background(rng, size)
        taken = np.zeros((size, size), dtype=bool)
        placed = 0
        for _ in range(40):
            if placed == objects_per_image:
                break
            poly = _random_shape(rng, size)
            mask = rasterize_polygon(poly, (size, size))
            if mask.sum() < 0.01 * size * size or (mask & _dilate(taken, 3)).any():
                continue
            color = rng.uniform(0, 255, size=3)
            yy, xx = np.nonzero(mask)
            shade = (xx - xx.mean()) / size * rng.uniform(-40, 40)
            img[yy, xx] = color[None, :] + shade[:, None]
            taken |= mask
            instances.append({"image": f"images/{name}.png", "object_id": f"{name}/obj{placed}", "polygon": poly})
            placed += 1
        sigma = float(rng.choice(noise_sigmas)) if noise_sigmas is not None else float(rng.uniform(0, 8))
        img = img + rng.normal(0, sigma, size=img.shape) if sigma > 0 else img
        Image.fromarray(np.clip(np.round(img), 0, 255).astype(np.uint8)).save(root / "images" / f"{name}.png")
        images.append({"image": f"images/{name}.png", "background_id": name, "noise_sigma": sigma})
    (root / INDEX_NAME).write_text(json.dumps({"instances": instances, "images": images}, indent=1))
    return load_corpus(root)


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    return binary_dilation(mask, iterations=r) if mask.any() else mask
