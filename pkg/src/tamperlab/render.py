"""Detection overlays and score heatmaps as PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .forensic_eval import rasterize_detections

CLASS_COLORS = {
    "splice": (255, 0, 0),
    "copy_move": (0, 255, 0),
    "removal": (0, 0, 255),
    "tampered": (255, 0, 0),
}
BAND = 2
DASH = 4


def _int_box(box, shape: Tuple[int, int]) -> Tuple[int, int, int, int]:
    """Pixel rectangle [x1, x2) x [y1, y2) covered by ``box``, clamped to the image."""
    h, w = shape
    x1, y1, x2, y2 = (int(round(float(v))) for v in box[:4])
    return max(0, x1), max(0, y1), min(w, x2), min(h, y2)


def box_band(box, shape: Tuple[int, int], width: int = BAND) -> np.ndarray:
    """Mask of the pixels inside ``box`` within ``width`` of its border."""
    h, w = shape
    x1, y1, x2, y2 = _int_box(box, shape)
    band = np.zeros((h, w), dtype=bool)
    if x2 <= x1 or y2 <= y1:
        return band
    band[y1:y2, x1:x2] = True
    band[y1 + width:y2 - width, x1 + width:x2 - width] = False
    return band


def dashed_outline(box, shape: Tuple[int, int], dash: int = DASH) -> np.ndarray:
    """One-pixel outline of ``box`` drawn ``dash`` on, ``dash`` off along each side."""
    h, w = shape
    x1, y1, x2, y2 = _int_box(box, shape)
    out = np.zeros((h, w), dtype=bool)
    if x2 <= x1 or y2 <= y1:
        return out
    xs = np.arange(x1, x2)
    ys = np.arange(y1, y2)
    on_x = xs[((xs - x1) // dash) % 2 == 0]
    on_y = ys[((ys - y1) // dash) % 2 == 0]
    out[y1, on_x] = True
    out[y2 - 1, on_x] = True
    out[on_y, x1] = True
    out[on_y, x2 - 1] = True
    return out


def _fields(d):
    if hasattr(d, "box"):
        return d.box, d.label, d.score
    return d[0], d[1], d[2]


def render_overlay(image: np.ndarray, detections: Sequence, out_path, gt_boxes: Optional[Sequence] = None,
                   heatmap: bool = False, show_scores: bool = True, alpha: float = 0.5) -> Path:
    """Draw detections (2 px class-coloured band, score text) and dashed white GT boxes; write a PNG.

    ``detections`` holds :class:`Detection` objects or ``(box, label, score)``
    triples. With ``heatmap`` the image is first blended towards red in
    proportion to the rasterised pixel score map.
    """
    img = np.ascontiguousarray(image, dtype=np.uint8).copy()
    h, w = img.shape[:2]
    if heatmap and detections:
        scores = rasterize_detections([(_fields(d)[0], _fields(d)[2]) for d in detections], (h, w))
        weight = (alpha * scores)[..., None]
        blended = img.astype(np.float64) * (1 - weight) + weight * np.array([255.0, 0.0, 0.0])
        img = np.clip(np.round(blended), 0, 255).astype(np.uint8)
    for box in gt_boxes or ():
        img[dashed_outline(box, (h, w))] = 255
    labels = []
    for d in detections:
        box, label, score = _fields(d)
        img[box_band(box, (h, w))] = CLASS_COLORS.get(label, (255, 255, 0))
        labels.append((box, label, score))
    canvas = Image.fromarray(img)
    if show_scores and labels:
        draw = ImageDraw.Draw(canvas)
        for box, label, score in labels:
            x1, y1, _, _ = _int_box(box, (h, w))
            draw.text((x1 + BAND + 1, y1 + BAND + 1), f"{score:.2f}", fill=CLASS_COLORS.get(label, (255, 255, 0)))
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")
    return path
