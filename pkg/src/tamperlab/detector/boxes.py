"""Box geometry: anchors, IoU, delta coding, NMS, and anchor labelling.

Boxes are (x1, y1, x2, y2) in continuous pixel-edge coordinates, so a box
covering pixel columns a..b inclusive is (a, ., b + 1, .).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

DEFAULT_SCALES = (8, 16, 32, 64)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)  # h:w


@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray  # N x 4
    feature_shape: Tuple[int, int]
    stride: int
    scales: Tuple[float, ...]
    ratios: Tuple[float, ...]

    @property
    def per_location(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return len(self.boxes)


def generate_anchors(feature_h: int, feature_w: int, stride: int,
                     scales: Sequence[float] = DEFAULT_SCALES,
                     ratios: Sequence[float] = DEFAULT_RATIOS) -> AnchorSet:
    """Anchors ordered by (y, x, scale, ratio); each keeps area scale**2 with h/w = ratio."""
    sizes = []
    for s in scales:
        for r in ratios:
            sizes.append((s / np.sqrt(r), s * np.sqrt(r)))  # (w, h)
    sizes = np.asarray(sizes)
    ys, xs = np.meshgrid(np.arange(feature_h), np.arange(feature_w), indexing="ij")
    cx = (xs.reshape(-1, 1) + 0.5) * stride
    cy = (ys.reshape(-1, 1) + 0.5) * stride
    half_w = sizes[None, :, 0] / 2
    half_h = sizes[None, :, 1] / 2
    boxes = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1).reshape(-1, 4)
    return AnchorSet(boxes, (feature_h, feature_w), stride, tuple(scales), tuple(ratios))


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 for disjoint or degenerate boxes."""
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = box_area(a)
    area_b = box_area(b)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(valid, inter / np.where(union > 0, union, 1), 0.0)
    return out


def _centers(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_box_deltas(proposals, gts) -> np.ndarray:
    """((cx* - cx)/w, (cy* - cy)/h, ln(w*/w), ln(h*/h)); works row-wise on N x 4."""
    p = np.asarray(proposals, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    pcx, pcy, pw, ph = _centers(p)
    gcx, gcy, gw, gh = _centers(g)
    if np.any(pw <= 0) or np.any(ph <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("encode_box_deltas: boxes must have positive width and height")
    return np.stack([(gcx - pcx) / pw, (gcy - pcy) / ph, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def decode_box_deltas(proposals, deltas, image_shape: Tuple[int, int] | None = None) -> np.ndarray:
    """Inverse of :func:`encode_box_deltas`, clamped to ``(height, width)`` when given."""
    p = np.asarray(proposals, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    pcx, pcy, pw, ph = _centers(p)
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise ValueError("decode_box_deltas: proposals must have positive width and height")
    # exp overflow guard, same role as the usual log(1000/16) clip
    dw = np.minimum(d[..., 2], 10.0)
    dh = np.minimum(d[..., 3], 10.0)
    cx = pcx + d[..., 0] * pw
    cy = pcy + d[..., 1] * ph
    w = pw * np.exp(dw)
    h = ph * np.exp(dh)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_shape is not None:
        out = clip_boxes(out, image_shape)
    return out


def clip_boxes(boxes: np.ndarray, image_shape: Tuple[int, int]) -> np.ndarray:
    h, w = image_shape
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 0::2] = np.clip(out[..., 0::2], 0, w)
    out[..., 1::2] = np.clip(out[..., 1::2], 0, h)
    return out


def enlarge_box(box, pad: float, image_shape: Tuple[int, int]) -> Tuple[float, float, float, float]:
    """Move every side outward by ``pad`` and clamp to ``(height, width)``."""
    h, w = image_shape
    x1, y1, x2, y2 = box[:4]
    return (max(0, x1 - pad), max(0, y1 - pad), min(w, x2 + pad), min(h, y2 + pad))


def nms(boxes, scores, iou_threshold: float = 0.2, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    Equal scores are visited in increasing index order. A box is suppressed
    when its IoU with an already kept box exceeds ``iou_threshold``. With
    ``max_keep`` the scan stops once that many boxes are kept, which gives
    the same prefix as a full run.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    b = boxes[order]
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    area = box_area(b)
    alive = np.ones(len(b), dtype=bool)
    keep = []
    limit = len(b) if max_keep is None else max_keep
    for i in range(len(b)):
        if len(keep) >= limit:
            break
        if not alive[i]:
            continue
        keep.append(order[i])
        if area[i] <= 0:
            continue
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if not rest.size:
            break
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.maximum(iw, 0) * np.maximum(ih, 0)
        union = area[i] + area[rest] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            over = (area[rest] > 0) & (inter / union > iou_threshold)
        alive[rest[over]] = False
    return np.asarray(keep, dtype=np.int64)


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class AnchorAssignment:
    """Per-anchor RPN training labels (g*) and regression targets (f*)."""

    labels: np.ndarray  # N, values POSITIVE / NEGATIVE / IGNORE
    targets: np.ndarray  # N x 4, meaningful where labels == POSITIVE
    max_iou: np.ndarray  # N
    sampled: np.ndarray  # indices of the N_cls mini-batch, sorted

    @property
    def batch_size(self) -> int:
        return int(self.sampled.size)

    @property
    def sampled_positive(self) -> np.ndarray:
        return self.sampled[self.labels[self.sampled] == POSITIVE]


def assign_anchor_labels(anchors: AnchorSet | np.ndarray, gt_boxes, image_shape: Tuple[int, int],
                         batch_size: int = 64, rng: np.random.Generator | None = None,
                         pos_iou: float = 0.7, neg_iou: float = 0.3,
                         pos_fraction: float = 0.5) -> AnchorAssignment:
    """Label anchors positive / negative / ignore and sample the RPN mini-batch.

    Anchors crossing the image border are ignored. Each ground truth's
    best-overlapping anchors are forced positive.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    h, w = image_shape
    n = len(boxes)
    inside = (boxes[:, 0] >= 0) & (boxes[:, 1] >= 0) & (boxes[:, 2] <= w) & (boxes[:, 3] <= h)
    labels = np.full(n, IGNORE, dtype=np.int8)
    targets = np.zeros((n, 4))
    max_iou = np.zeros(n)
    if len(gt):
        overlaps = iou_matrix(boxes, gt)
        overlaps[~inside] = 0.0
        argmax = overlaps.argmax(axis=1)
        max_iou = overlaps[np.arange(n), argmax]
        labels[inside & (max_iou <= neg_iou)] = NEGATIVE
        labels[inside & (max_iou >= pos_iou)] = POSITIVE
        gt_best = overlaps.max(axis=0)
        for j in range(len(gt)):
            if gt_best[j] > 0:
                rows = np.flatnonzero(inside & (overlaps[:, j] == gt_best[j]))
                labels[rows] = POSITIVE
                argmax[rows] = j
        pos = labels == POSITIVE
        targets[pos] = encode_box_deltas(boxes[pos], gt[argmax[pos]])
    else:
        labels[inside] = NEGATIVE

    pos_idx = np.flatnonzero(labels == POSITIVE)
    neg_idx = np.flatnonzero(labels == NEGATIVE)
    if neg_idx.size == 0:
        raise ValueError("assign_anchor_labels: no valid negative anchors (degenerate image)")
    n_pos = min(pos_idx.size, int(batch_size * pos_fraction))
    n_neg = min(neg_idx.size, batch_size - n_pos)
    chosen_pos = rng.choice(pos_idx, size=n_pos, replace=False) if n_pos else pos_idx[:0]
    chosen_neg = rng.choice(neg_idx, size=n_neg, replace=False)
    sampled = np.sort(np.concatenate([chosen_pos, chosen_neg]))
    return AnchorAssignment(labels, targets, max_iou, sampled)


def propose_rois(fg_scores: np.ndarray, deltas: np.ndarray, anchors: AnchorSet | np.ndarray,
                 image_shape: Tuple[int, int], phase: str = "test",
                 nms_threshold: float = 0.7, top_train: int = 64, top_test: int = 300,
                 min_size: float = 8.0, pre_nms_top: int = 6000) -> Tuple[np.ndarray, np.ndarray]:
    """Decode anchors into scored proposals, NMS them, keep the top 64 / 300."""
    if phase not in ("train", "test"):
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    props = decode_box_deltas(boxes, deltas, image_shape)
    scores = np.asarray(fg_scores, dtype=np.float64).reshape(-1)
    ws = props[:, 2] - props[:, 0]
    hs = props[:, 3] - props[:, 1]
    ok = np.flatnonzero((ws >= min_size) & (hs >= min_size))
    order = ok[np.argsort(-scores[ok], kind="stable")][:pre_nms_top]
    top = top_train if phase == "train" else top_test
    keep = order[nms(props[order], scores[order], nms_threshold, max_keep=top)]
    return props[keep], scores[keep]
