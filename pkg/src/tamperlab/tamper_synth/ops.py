"""Splice, copy-move and removal forgeries with exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .corpus import SourceRecord

TECHNIQUES = ("splice", "copy_move", "removal")
AUTHENTIC = "authentic"

MIN_OBJECT_FRACTION = 0.01
MAX_OBJECT_FRACTION = 0.5
MAX_COPY_MOVE_OVERLAP = 0.2
MAX_REMOVAL_FRACTION = 0.3

Box = Tuple[int, int, int, int, str]


class TamperRetry(Exception):
    """The requested forgery violates a size/placement constraint; draw new parameters."""


@dataclass
class TamperSample:
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W bool
    boxes: List[Box]
    technique: str
    provenance: Dict[str, Optional[str]] = field(default_factory=dict)
    split: str = "train"

    def with_image(self, image: np.ndarray, mask: Optional[np.ndarray] = None) -> "TamperSample":
        mask = self.mask if mask is None else mask
        return replace(self, image=image, mask=mask, boxes=mask_boxes(mask, self.box_label))

    @property
    def box_label(self) -> str:
        return self.technique

    @property
    def box_array(self) -> np.ndarray:
        return np.asarray([b[:4] for b in self.boxes], dtype=np.float64).reshape(-1, 4)


def mask_boxes(mask: np.ndarray, label: str) -> List[Box]:
    """Tight (x1, y1, x2, y2) bounds, x2/y2 exclusive, of the 8-connected mask components."""
    labelled, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    boxes = []
    for sl in ndimage.find_objects(labelled):
        ys, xs = sl
        boxes.append((int(xs.start), int(ys.start), int(xs.stop), int(ys.stop), label))
    boxes.sort()
    return boxes


def _bbox(mask: np.ndarray) -> Tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _feather(out: np.ndarray, base: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend the one-pixel inner rim of ``mask`` 50/50 with ``base``."""
    rim = mask & ~ndimage.binary_erosion(mask)
    out = out.astype(np.float64)
    out[rim] = 0.5 * out[rim] + 0.5 * base[rim]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def make_splice(source: SourceRecord, object_id: str, target: Union[SourceRecord, np.ndarray],
                placement: Tuple[int, int], rng: Optional[np.random.Generator] = None,
                feather: bool = False, target_id: Optional[str] = None) -> TamperSample:
    """Paste an object of ``source`` into ``target`` with its bbox top-left at ``placement`` (x, y)."""
    target_img = target.image if isinstance(target, SourceRecord) else np.asarray(target)
    background_id = target.background_id if isinstance(target, SourceRecord) else target_id
    obj = source.object(object_id)
    th, tw = target_img.shape[:2]
    frac = obj.area / float(th * tw)
    if not MIN_OBJECT_FRACTION <= frac <= MAX_OBJECT_FRACTION:
        raise TamperRetry(f"object covers {frac:.3f} of the target, outside "
                          f"[{MIN_OBJECT_FRACTION}, {MAX_OBJECT_FRACTION}]")
    x1, y1, x2, y2 = _bbox(obj.mask)
    px, py = placement
    if px < 0 or py < 0 or px + (x2 - x1) > tw or py + (y2 - y1) > th:
        raise TamperRetry("placement puts the object outside the target")
    crop_mask = obj.mask[y1:y2, x1:x2]
    crop_pix = source.image[y1:y2, x1:x2]
    out = target_img.copy()
    mask = np.zeros((th, tw), dtype=bool)
    mask[py:py + y2 - y1, px:px + x2 - x1] = crop_mask
    out[mask] = crop_pix[crop_mask]
    if feather:
        out = _feather(out, target_img, mask)
    return TamperSample(out, mask, mask_boxes(mask, "splice"), "splice",
                        {"object_id": object_id, "background_id": background_id,
                         "source_id": source.background_id})


def make_copy_move(image: np.ndarray, object_mask: np.ndarray, offset: Tuple[int, int],
                   rng: Optional[np.random.Generator] = None, object_id: Optional[str] = None,
                   background_id: Optional[str] = None) -> TamperSample:
    """Duplicate the masked region at ``offset`` (dx, dy); ground truth is the pasted copy only."""
    dx, dy = int(offset[0]), int(offset[1])
    if dx == 0 and dy == 0:
        raise TamperRetry("zero copy-move offset")
    h, w = object_mask.shape
    ys, xs = np.nonzero(object_mask)
    if ys.size == 0:
        raise TamperRetry("empty object mask")
    ny, nx = ys + dy, xs + dx
    if ny.min() < 0 or nx.min() < 0 or ny.max() >= h or nx.max() >= w:
        raise TamperRetry("translated region leaves the image")
    pasted = np.zeros_like(object_mask, dtype=bool)
    pasted[ny, nx] = True
    overlap = (pasted & object_mask).sum() / float(ys.size)
    if overlap >= MAX_COPY_MOVE_OVERLAP:
        raise TamperRetry(f"copy overlaps its source by {overlap:.2f}")
    out = image.copy()
    out[ny, nx] = image[ys, xs]
    return TamperSample(out, pasted, mask_boxes(pasted, "copy_move"), "copy_move",
                        {"object_id": object_id, "background_id": background_id, "source_id": background_id})


def inpaint_diffusion(image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """Fill ``mask`` front by front with the mean of known 4-neighbours, then 3x3-blur the fill.

    Returns the float64 result and the number of fill iterations.
    """
    if mask.all():
        raise ValueError("cannot inpaint a mask that covers the whole image")
    img = image.astype(np.float64)
    if img.ndim == 2:
        img = img[..., None]
    known = ~mask
    out = np.where(known[..., None], img, 0.0)
    iterations = 0
    while not known.all():
        sums = np.zeros_like(out)
        counts = np.zeros(known.shape)
        kf = known.astype(np.float64)
        kv = out * kf[..., None]
        sums[1:] += kv[:-1]
        counts[1:] += kf[:-1]
        sums[:-1] += kv[1:]
        counts[:-1] += kf[1:]
        sums[:, 1:] += kv[:, :-1]
        counts[:, 1:] += kf[:, :-1]
        sums[:, :-1] += kv[:, 1:]
        counts[:, :-1] += kf[:, 1:]
        front = ~known & (counts > 0)
        out[front] = sums[front] / counts[front][:, None]
        known = known | front
        iterations += 1
    # 3x3 mean over in-image neighbours, applied inside the mask only
    ones = np.ones(mask.shape)
    box_sum = ndimage.uniform_filter(out, size=(3, 3, 1), mode="constant") * 9
    box_cnt = ndimage.uniform_filter(ones, size=3, mode="constant") * 9
    blurred = box_sum / box_cnt[..., None]
    out[mask] = blurred[mask]
    return (out[..., 0] if image.ndim == 2 else out), iterations


def make_removal(image: np.ndarray, object_mask: np.ndarray, rng: Optional[np.random.Generator] = None,
                 object_id: Optional[str] = None, background_id: Optional[str] = None) -> TamperSample:
    """Erase the masked region and fill it by diffusion inpainting."""
    mask = np.asarray(object_mask, dtype=bool)
    if mask.all():
        raise ValueError("removal mask covers the whole image")
    frac = mask.sum() / float(mask.size)
    if frac == 0 or frac > MAX_REMOVAL_FRACTION:
        raise TamperRetry(f"removal mask covers {frac:.3f} of the image")
    filled, _ = inpaint_diffusion(image, mask)
    out = np.clip(np.round(filled), 0, 255).astype(np.uint8)
    return TamperSample(out, mask.copy(), mask_boxes(mask, "removal"), "removal",
                        {"object_id": object_id, "background_id": background_id, "source_id": background_id})


def authentic_sample(record: SourceRecord) -> TamperSample:
    h, w = record.image.shape[:2]
    return TamperSample(record.image.copy(), np.zeros((h, w), dtype=bool), [], AUTHENTIC,
                        {"object_id": None, "background_id": record.background_id, "source_id": None})
