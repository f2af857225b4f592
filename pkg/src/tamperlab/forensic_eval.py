"""Pixel-level F1/AUC from box confidences, COCO-style detection AP, attack reports."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .detector.boxes import iou_matrix
from .detector.model import Detection, TwoStreamModel, detect
from .tamper_synth.augment import attack_sample
from .tamper_synth.ops import TamperSample

COCO_IOUS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def _box_score(d) -> Tuple[Sequence[float], float]:
    if isinstance(d, Detection):
        return d.box, d.score
    box, score = d[0], d[1]
    return box, float(score)


def rasterize_detections(detections, shape: Tuple[int, int]) -> np.ndarray:
    """Pixel score map: max score over boxes containing the pixel centre, else 0.

    ``detections`` holds :class:`Detection` objects or ``(box, score)`` pairs.
    """
    h, w = shape
    out = np.zeros((h, w), dtype=np.float64)
    for d in detections:
        (x1, y1, x2, y2), score = _box_score(d)
        c1 = int(np.clip(np.ceil(x1 - 0.5), 0, w))
        c2 = int(np.clip(np.ceil(x2 - 0.5), 0, w))
        r1 = int(np.clip(np.ceil(y1 - 0.5), 0, h))
        r2 = int(np.clip(np.ceil(y2 - 0.5), 0, h))
        if c2 > c1 and r2 > r1:
            np.maximum(out[r1:r2, c1:c2], score, out=out[r1:r2, c1:c2])
    return out


def f1_best_threshold(scores: np.ndarray, gt: np.ndarray) -> Optional[Tuple[float, float]]:
    """Best per-image F1 over thresholds {distinct scores} U {0}, predicting ``score >= t``.

    Returns ``(f1, threshold)``; the smallest threshold wins ties. ``None``
    when the ground truth has no positive pixel.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=bool).ravel()
    if scores.shape != gt.shape:
        raise ValueError(f"score map has {scores.size} pixels, mask has {gt.size}")
    n_pos = int(gt.sum())
    if n_pos == 0:
        return None
    thresholds = np.union1d(scores, [0.0])
    all_sorted = np.sort(scores)
    pos_sorted = np.sort(scores[gt])
    predicted = scores.size - np.searchsorted(all_sorted, thresholds, side="left")
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    f1 = 2.0 * tp / (predicted + n_pos)
    best = int(np.argmax(f1))
    return float(f1[best]), float(thresholds[best])


def pixel_auc(scores: np.ndarray, gt: np.ndarray) -> Optional[float]:
    """Mann-Whitney ROC area, ties counting 1/2; ``None`` for single-class ground truth."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=bool).ravel()
    if scores.shape != gt.shape:
        raise ValueError(f"score map has {scores.size} pixels, mask has {gt.size}")
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[gt].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # all-point interpolation: precision envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _class_ap(dets: List[Tuple[float, int, np.ndarray]], gts: Dict[int, np.ndarray], thr: float) -> float:
    """``dets``: (score, image index, box) sorted best-first; ``gts``: image -> K x 4."""
    n_gt = sum(len(g) for g in gts.values())
    matched = {i: np.zeros(len(g), dtype=bool) for i, g in gts.items()}
    tp = np.zeros(len(dets))
    for k, (_, img, box) in enumerate(dets):
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = iou_matrix(box[None], g)[0]
        ious[matched[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            matched[img][j] = True
            tp[k] = 1.0
    return _average_precision(tp, n_gt)


@dataclass
class ApResult:
    ap_per_class: Dict[str, float]  # mean over IoU 0.50:0.05:0.95
    ap50_per_class: Dict[str, float]
    mean_ap: float
    mean_ap50: float


def detection_ap(detections: Sequence[Sequence], gt_boxes: Sequence[Sequence],
                 iou_thresholds: Sequence[float] = COCO_IOUS) -> ApResult:
    """COCO-style AP per class, averaged over ``iou_thresholds``, plus AP at IoU 0.5.

    ``detections[i]`` lists the detections of image i as :class:`Detection`
    or ``(box, label, score)``; ``gt_boxes[i]`` lists ``(x1, y1, x2, y2, label)``.
    Classes are those present in the ground truth; detections of other
    classes are ignored. Within a class, detections are ranked by score
    (ties by image, then list order) and each is matched greedily to the
    unmatched ground truth box of highest IoU.
    """
    if len(detections) != len(gt_boxes):
        raise ValueError(f"{len(detections)} detection lists for {len(gt_boxes)} images")
    classes = sorted({str(b[4]) for boxes in gt_boxes for b in boxes})
    per, per50 = {}, {}
    for cls in classes:
        gts = {}
        for i, boxes in enumerate(gt_boxes):
            sel = [b[:4] for b in boxes if str(b[4]) == cls]
            if sel:
                gts[i] = np.asarray(sel, dtype=np.float64)
        dets = []
        for i, ds in enumerate(detections):
            for j, d in enumerate(ds):
                if isinstance(d, Detection):
                    box, label, score = d.box, d.label, d.score
                else:
                    box, label, score = d
                if str(label) == cls:
                    dets.append((-float(score), i, j, np.asarray(box, dtype=np.float64)))
        dets.sort(key=lambda t: t[:3])
        ranked = [(-s, i, b) for s, i, _, b in dets]
        aps = [_class_ap(ranked, gts, t) for t in iou_thresholds]
        per[cls] = float(np.mean(aps))
        per50[cls] = _class_ap(ranked, gts, 0.5)
    mean = float(np.mean(list(per.values()))) if per else 0.0
    mean50 = float(np.mean(list(per50.values()))) if per50 else 0.0
    return ApResult(per, per50, mean, mean50)


# ---------------------------------------------------------------------------
# Manifest evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    f1_best: Optional[float]
    auc: Optional[float]
    ap_per_class: Dict[str, float]
    mean_ap: float
    ap50_per_class: Dict[str, float]
    mean_ap50: float
    sample_count: int
    pixel_count: int  # images with a nonempty mask, i.e. those averaged into F1/AUC
    f1_by_technique: Dict[str, float] = field(default_factory=dict)
    attacks: Dict[str, "MetricsReport"] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "f1_best": self.f1_best, "auc": self.auc, "ap_per_class": dict(self.ap_per_class),
            "mean_ap": self.mean_ap, "ap50_per_class": dict(self.ap50_per_class), "mean_ap50": self.mean_ap50,
            "sample_count": self.sample_count, "pixel_count": self.pixel_count,
            "f1_by_technique": dict(self.f1_by_technique),
        }
        if self.attacks:
            out["attacks"] = {k: v.as_dict() for k, v in self.attacks.items()}
        return out

    def to_json(self) -> str:
        meta = {"auc_averaging": "per-image mean", "f1_threshold": "per-image best",
                "excluded_from_pixel_metrics": "images with empty masks"}
        return json.dumps({"report": self.as_dict(), "meta": meta}, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


def gt_for_model(model: TwoStreamModel, sample: TamperSample) -> List[Tuple[int, int, int, int, str]]:
    """Ground-truth boxes relabelled for the model's class set (techniques collapse in two-class mode)."""
    names = model.config.class_names
    if model.config.mode == "two-class":
        return [(b[0], b[1], b[2], b[3], names[1]) for b in sample.boxes]
    bad = sorted({b[4] for b in sample.boxes} - set(names[1:]))
    if bad:
        raise ValueError(f"manifest labels {bad} do not match the {model.config.mode} model classes "
                         f"{list(names[1:])}; was the checkpoint trained in the other mode?")
    return list(sample.boxes)


def _detect_one(args):
    model, sample = args
    return detect(model, sample.image)


def _report(model: TwoStreamModel, samples: Sequence[TamperSample], jobs: int) -> MetricsReport:
    if jobs > 1 and len(samples) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            dets = list(pool.map(_detect_one, [(model, s) for s in samples]))
    else:
        dets = [detect(model, s.image) for s in samples]
    f1s, aucs = [], []
    by_tech: Dict[str, List[float]] = {}
    for s, d in zip(samples, dets):
        score_map = rasterize_detections(d, s.mask.shape)
        f1 = f1_best_threshold(score_map, s.mask)
        auc = pixel_auc(score_map, s.mask)
        if f1 is not None:
            f1s.append(f1[0])
            by_tech.setdefault(s.technique, []).append(f1[0])
        if auc is not None:
            aucs.append(auc)
    ap = detection_ap(dets, [gt_for_model(model, s) for s in samples])
    return MetricsReport(
        f1_best=float(np.mean(f1s)) if f1s else None,
        auc=float(np.mean(aucs)) if aucs else None,
        ap_per_class=ap.ap_per_class, mean_ap=ap.mean_ap,
        ap50_per_class=ap.ap50_per_class, mean_ap50=ap.mean_ap50,
        sample_count=len(samples), pixel_count=len(f1s),
        f1_by_technique={k: float(np.mean(v)) for k, v in sorted(by_tech.items())},
    )


def evaluate_manifest(model: TwoStreamModel, samples: Sequence[TamperSample], attacks: Sequence[str] = (),
                      jobs: int = 1) -> MetricsReport:
    """Clean report with one sub-report per attack spec (e.g. ``jpeg70``, ``resize0.5``)."""
    for s in samples:
        gt_for_model(model, s)  # fail early on a mode mismatch
    clean = _report(model, samples, jobs)
    for spec in attacks:
        attacked = [attack_sample(s, spec) for s in samples]
        clean.attacks[spec] = _report(model, attacked, jobs)
    return clean
