"""End-to-end training loop."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import srm
from ..tamper_synth.augment import augment as augment_sample
from ..tamper_synth.ops import AUTHENTIC, TamperSample
from ..tensor_core import SGD, SgdConfig, Tape, backward_pass, scale
from .losses import LossBreakdown
from .model import TwoStreamModel, forward_train

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_rpn_cls", "l_rpn_reg", "l_tamper", "l_bbox", "l_total", "lr")


def class_ids(model: TwoStreamModel, sample: TamperSample) -> np.ndarray:
    names = model.config.class_names
    if model.config.mode == "two-class":
        return np.ones(len(sample.boxes), dtype=np.int64)
    try:
        return np.asarray([names.index(b[4]) for b in sample.boxes], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"box label not among model classes {names[1:]}: {exc}") from exc


class _Prepared:
    """Resized image, boxes and cached SRM map of one (sample, flipped) view."""

    def __init__(self, model: TwoStreamModel, sample: TamperSample):
        image = np.ascontiguousarray(sample.image, dtype=np.uint8)
        h, w = image.shape[:2]
        self.image = model.resize(image)
        nh, nw = self.image.shape[:2]
        self.boxes = sample.box_array * np.array([nw / w, nh / h, nw / w, nh / h])
        self.labels = class_ids(model, sample)
        self.noise = srm.apply_srm(self.image) if "noise" in model.config.stream_names else None


def train_model(model: TwoStreamModel, samples: Sequence[TamperSample], steps: int, sgd: SgdConfig,
                seed: int = 0, augmentations: Sequence[str] = ("flip",), log_path=None,
                callback: Optional[Callable[[int, LossBreakdown], None]] = None,
                images_per_step: int = 1) -> List[LossBreakdown]:
    """Train in place; returns the per-step loss breakdowns.

    Each step averages the loss gradients of ``images_per_step`` images.
    Images are visited in a fresh random order every epoch. Each listed
    augmentation is applied with probability 1/2. When ``log_path`` is
    given a CSV with columns step,l_rpn_cls,l_rpn_reg,l_tamper,l_bbox,l_total,lr
    is written; with several images per step the logged losses are their means.
    """
    if not samples:
        raise ValueError("no training samples")
    if images_per_step < 1:
        raise ValueError("images_per_step must be at least 1")
    rng = np.random.default_rng(seed)
    opt = SGD(model.parameters(), sgd)
    cache: Dict[Tuple[int, str], _Prepared] = {}
    history: List[LossBreakdown] = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        order: np.ndarray = np.empty(0, dtype=np.int64)
        seen = 0
        for step in range(steps):
            parts = []
            for _ in range(images_per_step):
                pos = seen % len(samples)
                if pos == 0:
                    order = rng.permutation(len(samples))
                seen += 1
                idx = int(order[pos])
                sample = samples[idx]
                tag = ""
                for aug in augmentations:
                    if rng.random() < 0.5:
                        tag += aug + ";"
                key = (idx, tag)
                if key not in cache:
                    view = sample
                    for aug in tag.split(";")[:-1]:
                        view = augment_sample(view, aug, np.random.default_rng([seed, idx, len(tag)]))
                    cache[key] = _Prepared(model, view)
                prep = cache[key]
                with Tape() as tape:
                    loss, part, _ = forward_train(model, prep.image, prep.boxes, prep.labels, rng,
                                                  noise=prep.noise)
                    if images_per_step > 1:
                        loss = scale(loss, 1.0 / images_per_step)
                backward_pass(tape, loss, opt.params)
                parts.append(part)
            breakdown = parts[0] if len(parts) == 1 else _mean_breakdown(parts)
            lr = opt.step(step)
            history.append(breakdown)
            if writer is not None:
                writer.writerow([step] + [repr(getattr(breakdown, c)) for c in LOG_COLUMNS[1:-1]] + [repr(lr)])
            if callback is not None:
                callback(step, breakdown)
            if step % 100 == 0:
                log.debug("step %d loss %.4f (rpn %.4f/%.4f tamper %.4f bbox %.4f)", step, breakdown.l_total,
                          breakdown.l_rpn_cls, breakdown.l_rpn_reg, breakdown.l_tamper, breakdown.l_bbox)
    finally:
        if fh is not None:
            fh.close()
    return history


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    mean = lambda name: float(np.mean([getattr(p, name) for p in parts]))
    return LossBreakdown.from_components(mean("l_rpn_cls"), mean("l_rpn_reg"), mean("l_tamper"), mean("l_bbox"),
                                         parts[0].lam)


def tampered_only(samples: Sequence[TamperSample]) -> List[TamperSample]:
    return [s for s in samples if s.technique != AUTHENTIC]
