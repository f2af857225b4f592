"""Dataset generation, provenance-disjoint splitting and JSON-lines manifests."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .corpus import SourceRecord
from .ops import (
    AUTHENTIC, MAX_OBJECT_FRACTION, MIN_OBJECT_FRACTION, MAX_REMOVAL_FRACTION, TECHNIQUES, TamperRetry,
    TamperSample, authentic_sample, make_copy_move, make_removal, make_splice,
)

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 200


class ManifestError(ValueError):
    pass


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    """Per-sample generator derived from (master seed, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def _eligible(rec: SourceRecord, lo: float, hi: float):
    area = float(rec.image.shape[0] * rec.image.shape[1])
    return [o for o in rec.objects if lo <= o.area / area <= hi]


def _attempt(records: Sequence[SourceRecord], technique: str, rng: np.random.Generator,
             min_fraction: float, max_fraction: float) -> TamperSample:
    if technique == "splice":
        if len(records) < 2:
            raise TamperRetry("splicing needs at least two corpus images")
        si, ti = rng.choice(len(records), size=2, replace=False)
        source, target = records[si], records[ti]
        objs = _eligible(source, min_fraction, max_fraction)
        if not objs:
            raise TamperRetry("source has no object of admissible size")
        obj = objs[rng.integers(len(objs))]
        ys, xs = np.nonzero(obj.mask)
        bw, bh = xs.max() - xs.min() + 1, ys.max() - ys.min() + 1
        th, tw = target.image.shape[:2]
        if bw > tw or bh > th:
            raise TamperRetry("object larger than target")
        placement = (int(rng.integers(0, tw - bw + 1)), int(rng.integers(0, th - bh + 1)))
        return make_splice(source, obj.object_id, target, placement, rng)
    rec = records[rng.integers(len(records))]
    hi = min(max_fraction, MAX_REMOVAL_FRACTION) if technique == "removal" else max_fraction
    objs = _eligible(rec, min_fraction, hi)
    if not objs:
        raise TamperRetry("image has no object of admissible size")
    obj = objs[rng.integers(len(objs))]
    if technique == "copy_move":
        h, w = obj.mask.shape
        ys, xs = np.nonzero(obj.mask)
        dx = int(rng.integers(-xs.min(), w - xs.max()))
        dy = int(rng.integers(-ys.min(), h - ys.max()))
        return make_copy_move(rec.image, obj.mask, (dx, dy), rng, obj.object_id, rec.background_id)
    if technique == "removal":
        return make_removal(rec.image, obj.mask, rng, obj.object_id, rec.background_id)
    raise ValueError(f"unknown technique {technique!r}")


def generate_one(records: Sequence[SourceRecord], technique: str, seed: int, index: int,
                 min_fraction: float = MIN_OBJECT_FRACTION,
                 max_fraction: float = MAX_OBJECT_FRACTION) -> TamperSample:
    rng = sample_rng(seed, index)
    for _ in range(MAX_ATTEMPTS):
        try:
            return _attempt(records, technique, rng, min_fraction, max_fraction)
        except TamperRetry:
            continue
    raise RuntimeError(f"could not generate a {technique} sample after {MAX_ATTEMPTS} attempts; "
                       "the corpus has no objects satisfying the size constraints")


def _background_of(records: Sequence[SourceRecord], sample: TamperSample) -> SourceRecord:
    bid = sample.provenance["background_id"]
    for r in records:
        if r.background_id == bid:
            return r
    raise KeyError(bid)


def _generate_pair(args) -> List[TamperSample]:
    records, technique, seed, index, with_authentic, lo, hi = args
    s = generate_one(records, technique, seed, index, lo, hi)
    return [s, authentic_sample(_background_of(records, s))] if with_authentic else [s]


def generate_samples(records: Sequence[SourceRecord], count: int, techniques: Sequence[str] = TECHNIQUES,
                     seed: int = 0, with_authentic: bool = True, min_fraction: float = MIN_OBJECT_FRACTION,
                     max_fraction: float = MAX_OBJECT_FRACTION, jobs: int = 1) -> List[TamperSample]:
    """``count`` tampered samples cycling through ``techniques``.

    Each tampered sample is followed by its untouched background image as an
    authentic record when ``with_authentic`` is set. Output order and bytes
    depend only on (records, seed), never on ``jobs``.
    """
    for t in techniques:
        if t not in TECHNIQUES:
            raise ValueError(f"unknown technique {t!r}")
    tasks = [(records, techniques[i % len(techniques)], seed, i, with_authentic, min_fraction, max_fraction)
             for i in range(count)]
    if jobs > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_generate_pair, tasks))
    else:
        chunks = [_generate_pair(t) for t in tasks]
    return [s for chunk in chunks for s in chunk]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _nodes(sample: TamperSample) -> Tuple[str, Optional[str]]:
    prov = sample.provenance
    bg = f"image:{prov['background_id']}"
    if prov.get("object_id") is None:
        return bg, None
    src = prov.get("source_id")
    return bg, (f"image:{src}" if src is not None else f"object:{prov['object_id']}")


def split_train_test(samples: Sequence[TamperSample], test_fraction: float = 0.1,
                     rng: Optional[np.random.Generator] = None
                     ) -> Tuple[List[TamperSample], List[TamperSample]]:
    """Split so that no background id and no object id occurs in both splits.

    Whole source images are assigned to a side (an object follows the image
    it was cut from). A sample whose background and object land on different
    sides is dropped. The number of test images is chosen so the kept test
    fraction is as close as possible to ``test_fraction``.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    pairs = [_nodes(s) for s in samples]
    names = sorted({n for p in pairs for n in p if n is not None})
    if len(names) < 2:
        raise ValueError("corpus too small for a provenance-disjoint split (fewer than 2 source images)")
    order = rng.permutation(len(names))
    rank = {names[i]: r for r, i in enumerate(order)}
    bg = np.array([rank[b] for b, _ in pairs])
    ob = np.array([rank[o] if o is not None else rank[b] for b, o in pairs])

    def counts(m):
        test = (bg < m) & (ob < m)
        train = (bg >= m) & (ob >= m)
        return test, train

    def frac(m):
        test, train = counts(m)
        kept = test.sum() + train.sum()
        return test.sum() / kept if kept else 0.0

    lo, hi = 1, len(names) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if frac(mid) < test_fraction:
            lo = mid + 1
        else:
            hi = mid
    best = min({max(1, lo - 1), lo}, key=lambda m: (abs(frac(m) - test_fraction), m))
    test_mask, train_mask = counts(best)
    train = [replace(s, split="train") for s, k in zip(samples, train_mask) if k]
    test = [replace(s, split="test") for s, k in zip(samples, test_mask) if k]
    if not train or not test:
        raise ValueError(f"corpus too small for a provenance-disjoint split: "
                         f"{len(train)} train / {len(test)} test samples survive")
    dropped = len(samples) - len(train) - len(test)
    if dropped:
        log.info("split dropped %d of %d samples to keep provenance disjoint", dropped, len(samples))
    return train, test


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def _save_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def write_manifest(samples: Iterable[TamperSample], path) -> Path:
    """Write images/masks as PNG next to ``path`` and one JSON record per line."""
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_rel = f"images/{i:06d}.png"
        mask_rel = f"masks/{i:06d}.png"
        _save_png(np.ascontiguousarray(s.image, dtype=np.uint8), root / img_rel)
        _save_png(s.mask.astype(np.uint8) * 255, root / mask_rel)
        rec = {
            "image": img_rel,
            "mask": mask_rel,
            "boxes": [[int(b[0]), int(b[1]), int(b[2]), int(b[3]), b[4]] for b in s.boxes],
            "technique": s.technique,
            "provenance": s.provenance,
            "split": s.split,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_manifest(path, load_images: bool = True) -> List[TamperSample]:
    path = Path(path)
    root = path.parent
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            boxes = [(int(b[0]), int(b[1]), int(b[2]), int(b[3]), str(b[4])) for b in rec["boxes"]]
            technique = rec["technique"]
            split = rec.get("split", "train")
            if split not in ("train", "test"):
                raise ValueError(f"split must be train or test, got {split!r}")
            if technique not in TECHNIQUES + (AUTHENTIC,):
                raise ValueError(f"unknown technique {technique!r}")
            image = mask = None
            if load_images:
                with Image.open(root / rec["image"]) as im:
                    image = np.asarray(im.convert("RGB"))
                with Image.open(root / rec["mask"]) as im:
                    mask = np.asarray(im.convert("L")) > 127
        except (ValueError, KeyError, TypeError, IndexError, OSError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed manifest record: {exc}") from exc
        out.append(TamperSample(image, mask, boxes, technique, rec.get("provenance", {}), split))
    return out
