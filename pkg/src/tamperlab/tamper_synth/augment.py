"""Training augmentations and evaluation-time attacks."""

from __future__ import annotations

import io
import re
from dataclasses import replace
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .ops import TamperSample, mask_boxes

_SPEC = re.compile(r"^(flip|jpeg|noise|gaussian_noise|resize)\(?([0-9.]*)\)?$")


def parse_spec(spec: str) -> Tuple[str, Optional[float]]:
    """'flip', 'jpeg70', 'jpeg(70)', 'noise5', 'gaussian_noise(5)', 'resize0.5' -> (kind, value)."""
    m = _SPEC.match(spec.strip().lower())
    if not m:
        raise ValueError(f"unrecognised augmentation/attack spec {spec!r}")
    kind, value = m.group(1), m.group(2)
    if kind == "gaussian_noise":
        kind = "noise"
    if kind == "flip":
        if value:
            raise ValueError(f"flip takes no parameter: {spec!r}")
        return kind, None
    if not value:
        raise ValueError(f"{kind} needs a parameter: {spec!r}")
    return kind, float(value)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    buf = io.BytesIO()
    # 4:4:4 so that quality alone sets the loss; Pillow would otherwise subsample chroma
    Image.fromarray(image).save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"))


def resize_image(image: np.ndarray, scale: float) -> np.ndarray:
    if not 0 < scale <= 1:
        raise ValueError(f"resize scale must be in (0, 1], got {scale}")
    if scale == 1:
        return image.copy()
    h, w = image.shape[:2]
    size = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
    return np.asarray(Image.fromarray(image).resize(size, Image.BILINEAR))


def resize_mask(mask: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(shape):
        return mask.copy()
    h, w = shape
    im = Image.fromarray(mask.astype(np.uint8) * 255).resize((w, h), Image.NEAREST)
    return np.asarray(im) > 127


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return float("inf") if mse == 0 else 10 * np.log10(255.0 ** 2 / mse)


def augment(sample: TamperSample, spec: str, rng: Optional[np.random.Generator] = None) -> TamperSample:
    """Flip (image, mask, boxes), JPEG re-encode at quality Q, or add Gaussian noise of a variance."""
    kind, value = parse_spec(spec)
    if kind == "flip":
        w = sample.image.shape[1]
        boxes = sorted((w - x2, y1, w - x1, y2, c) for x1, y1, x2, y2, c in sample.boxes)
        return replace(sample, image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy(), boxes=boxes)
    if kind == "jpeg":
        return replace(sample, image=jpeg_roundtrip(sample.image, int(value)))
    if kind == "noise":
        rng = rng if rng is not None else np.random.default_rng(0)
        noisy = sample.image.astype(np.float64) + rng.normal(0.0, np.sqrt(value), size=sample.image.shape)
        return replace(sample, image=np.clip(np.round(noisy), 0, 255).astype(np.uint8))
    raise ValueError(f"{spec!r} is an attack, not a training augmentation")


def attack(image: np.ndarray, spec: str) -> np.ndarray:
    """JPEG(Q) re-encoding or bilinear down-resize by a scale in (0, 1]."""
    kind, value = parse_spec(spec)
    if kind == "jpeg":
        return jpeg_roundtrip(image, int(value))
    if kind == "resize":
        return resize_image(image, value)
    raise ValueError(f"{spec!r} is not an attack (expected jpeg or resize)")


def attack_sample(sample: TamperSample, spec: str) -> TamperSample:
    """Attack the image; a resize also resamples the mask (nearest) and recomputes boxes."""
    img = attack(sample.image, spec)
    mask = resize_mask(sample.mask, img.shape[:2])
    return replace(sample, image=img, mask=mask, boxes=mask_boxes(mask, sample.technique) if mask.any() else [])
