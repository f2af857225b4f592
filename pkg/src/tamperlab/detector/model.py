"""Two-stream (RGB + SRM noise) region-proposal detector with bilinear fusion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .. import srm
from ..tensor_core import (
    Tensor, conv2d, linear, load_tensors, maxpool2d, relu, reshape, save_tensors, scale, softmax, transpose,
)
from .boxes import (
    DEFAULT_RATIOS, DEFAULT_SCALES, AnchorAssignment, AnchorSet, assign_anchor_labels, clip_boxes,
    decode_box_deltas, encode_box_deltas, enlarge_box, generate_anchors, iou_matrix, nms, propose_rois,
)
from .layers import (
    RoiFeaturePair, SketchHashes, bilinear_fuse, compact_bilinear_fuse, make_sketch_hashes, roi_pool,
)
from .losses import LossBreakdown, rpn_loss, total_loss

TWO_CLASS = "two-class"
MULTI_CLASS = "multi-class"
CLASS_NAMES = {
    TWO_CLASS: ("background", "tampered"),
    MULTI_CLASS: ("background", "splice", "copy_move", "removal"),
}
COMPACT_MIN_CHANNELS = 256
META_KEY = "__meta__"


@dataclass(frozen=True)
class BackboneConfig:
    """Plain conv net: one 3x3 conv + ReLU per stage, 2x2 max-pool between stages."""

    channels: Tuple[int, ...] = (16, 32, 64, 64)
    input_size: int = 128  # shorter image side after resizing

    def __post_init__(self):
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError(f"invalid backbone channels {self.channels}")
        if self.input_size % self.stride:
            raise ValueError(f"total stride {self.stride} does not divide input size {self.input_size}")

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mode: str = TWO_CLASS
    streams: str = "both"  # both | rgb | noise
    rpn_stream: str = "rgb"  # noise only as an ablation
    fusion: str = "auto"  # auto | full | compact
    sketch_dim: int = 16384
    sketch_seed: int = 0
    anchor_scales: Tuple[float, ...] = DEFAULT_SCALES
    anchor_ratios: Tuple[float, ...] = DEFAULT_RATIOS
    lam: float = 10.0
    iou_pos: float = 0.7
    iou_neg: float = 0.3
    rpn_batch: int = 64
    rpn_nms: float = 0.7
    proposals_train: int = 64
    proposals_test: int = 300
    min_proposal_size: float = 8.0
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_gt_jitter: int = 16  # jittered copies of each GT box added to the RoI candidates
    nms: float = 0.2
    score_floor: float = 0.05
    max_detections: int = 100
    enlarge_pad: float = 20.0  # pixels at the reference resolution
    reference_size: int = 600
    bbox_stds: Tuple[float, ...] = (0.1, 0.1, 0.2, 0.2)
    bbox_hidden: int = 0  # width of a ReLU layer before the box regressor; 0 = linear regressor
    fusion_scale: Optional[float] = None  # None: sqrt(fused_dim)

    def __post_init__(self):
        if self.mode not in CLASS_NAMES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.streams not in ("both", "rgb", "noise"):
            raise ValueError(f"unknown streams {self.streams!r}")
        if self.rpn_stream not in ("rgb", "noise"):
            raise ValueError(f"unknown rpn_stream {self.rpn_stream!r}")
        if self.fusion not in ("auto", "full", "compact"):
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def class_names(self) -> Tuple[str, ...]:
        return CLASS_NAMES[self.mode]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def stream_names(self) -> Tuple[str, ...]:
        return ("rgb", "noise") if self.streams == "both" else (self.streams,)

    @property
    def rpn_source(self) -> str:
        return self.rpn_stream if self.streams == "both" else self.streams

    @property
    def fusion_kind(self) -> str:
        if self.fusion != "auto":
            return self.fusion
        return "compact" if self.backbone.out_channels >= COMPACT_MIN_CHANNELS else "full"

    @property
    def fused_dim(self) -> int:
        c = self.backbone.out_channels
        return self.sketch_dim if self.fusion_kind == "compact" else c * c

    @property
    def effective_fusion_scale(self) -> float:
        """Multiplier on the unit-norm fused vector so its entries are O(1) at the classifier."""
        return float(np.sqrt(self.fused_dim)) if self.fusion_scale is None else float(self.fusion_scale)

    @property
    def effective_enlarge_pad(self) -> float:
        return self.enlarge_pad * self.backbone.input_size / self.reference_size

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone", {})
        backbone = BackboneConfig(channels=tuple(bb.get("channels", (16, 32, 64, 64))),
                                  input_size=int(bb.get("input_size", 128)))
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise ValueError(f"unknown model config key {k!r}")
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(backbone=backbone, **kwargs)


@dataclass(frozen=True)
class Detection:
    box: Tuple[float, float, float, float]
    label: str
    score: float
    class_id: int

    def as_dict(self) -> dict:
        return {"box": [float(v) for v in self.box], "label": self.label, "score": float(self.score),
                "class_id": int(self.class_id)}


@dataclass
class TrainPlan:
    """Discrete choices of one training step, fixed so the loss is a smooth function of weights."""

    assignment: AnchorAssignment
    rois: np.ndarray
    roi_labels: np.ndarray
    roi_targets: np.ndarray  # already divided by bbox_stds
    n_reg: int


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class TwoStreamModel:
    """Parameters plus the forward pieces of the detector.

    The noise stream receives the SRM residual map of the input. The RPN and
    box-regression head read the RGB stream (or the only stream in the
    single-stream ablations); the classifier reads the bilinear fusion of the
    two RoI features.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor],
                 hashes: Optional[SketchHashes] = None):
        self.config = config
        self.params = params
        self.hashes = hashes
        self._anchor_cache: Dict[Tuple[int, int], AnchorSet] = {}

    # -- bookkeeping -----------------------------------------------------
    @property
    def stride(self) -> int:
        return self.config.backbone.stride

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def with_params(self, params: Dict[str, Tensor]) -> "TwoStreamModel":
        m = TwoStreamModel(self.config, params, self.hashes)
        m._anchor_cache = self._anchor_cache
        return m

    def anchors(self, fh: int, fw: int) -> AnchorSet:
        key = (fh, fw)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(fh, fw, self.stride, self.config.anchor_scales,
                                                       self.config.anchor_ratios)
        return self._anchor_cache[key]

    # -- input handling --------------------------------------------------
    def resized_shape(self, h: int, w: int) -> Tuple[int, int]:
        s = self.config.backbone.input_size / min(h, w)
        st = self.stride
        return max(st, int(round(h * s / st)) * st), max(st, int(round(w * s / st)) * st)

    def resize(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        nh, nw = self.resized_shape(h, w)
        if (nh, nw) == (h, w):
            return image
        return np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))

    def stream_inputs(self, image: np.ndarray, noise: Optional[np.ndarray] = None) -> Dict[str, Tensor]:
        """Network inputs for an already resized uint8 H x W x 3 image."""
        dt = self.dtype
        out = {}
        if "rgb" in self.config.stream_names:
            rgb = (np.transpose(image.astype(np.float64), (2, 0, 1)) - 127.5) / 127.5
            out["rgb"] = Tensor(rgb, dtype=dt)
        if "noise" in self.config.stream_names:
            if noise is None:
                noise = srm.cached_apply_srm(image)
            out["noise"] = Tensor(np.asarray(noise, dtype=np.float64) / srm.TRUNCATION, dtype=dt)
        return out

    # -- network pieces --------------------------------------------------
    def backbone(self, stream: str, x: Tensor) -> Tensor:
        n = len(self.config.backbone.channels)
        for i in range(n):
            x = relu(conv2d(x, self.params[f"{stream}.conv{i}.w"], self.params[f"{stream}.conv{i}.b"], 1, 1))
            if i < n - 1:
                x = maxpool2d(x)
        return x

    def features(self, inputs: Dict[str, Tensor]) -> Dict[str, Tensor]:
        return {k: self.backbone(k, v) for k, v in inputs.items()}

    def rpn(self, feat: Tensor) -> Tuple[Tensor, Tensor]:
        """Objectness logits (N x 2) and deltas (N x 4), anchors ordered (y, x, scale, ratio)."""
        p = self.params
        h = relu(conv2d(feat, p["rpn.conv.w"], p["rpn.conv.b"], 1, 1))
        cls = conv2d(h, p["rpn.cls.w"], p["rpn.cls.b"])
        reg = conv2d(h, p["rpn.reg.w"], p["rpn.reg.b"])
        _, fh, fw = feat.shape
        a = len(self.config.anchor_scales) * len(self.config.anchor_ratios)
        cls = reshape(transpose(reshape(cls, (a, 2, fh, fw)), (2, 3, 0, 1)), (fh * fw * a, 2))
        reg = reshape(transpose(reshape(reg, (a, 4, fh, fw)), (2, 3, 0, 1)), (fh * fw * a, 4))
        return cls, reg

    def roi_features(self, feats: Dict[str, Tensor], rois: np.ndarray) -> RoiFeaturePair:
        pooled = {k: roi_pool(v, rois, self.stride) for k, v in feats.items()}
        if self.config.streams == "both":
            return RoiFeaturePair(pooled["rgb"], pooled["noise"], rois)
        only = pooled[self.config.streams]
        return RoiFeaturePair(only, only, rois)

    def fuse(self, pair: RoiFeaturePair) -> Tensor:
        if self.config.fusion_kind == "compact":
            z = compact_bilinear_fuse(pair.f_rgb, pair.f_n, self.hashes)
        else:
            z = bilinear_fuse(pair.f_rgb, pair.f_n)
        return scale(z, self.config.effective_fusion_scale)

    def heads(self, pair: RoiFeaturePair) -> Tuple[Tensor, Tensor]:
        """Class logits from the fused feature, class-agnostic deltas from f_RGB."""
        p = self.params
        logits = linear(self.fuse(pair), p["head.cls.w"], p["head.cls.b"])
        r, s, c = pair.f_rgb.shape
        x = reshape(pair.f_rgb, (r, s * c))
        if self.config.bbox_hidden:
            x = relu(linear(x, p["head.hidden.w"], p["head.hidden.b"]))
        deltas = linear(x, p["head.bbox.w"], p["head.bbox.b"])
        return logits, deltas


def build_two_stream(config: ModelConfig = ModelConfig(), seed: int = 0) -> TwoStreamModel:
    """Fresh model; weights drawn from centred uniforms with bound gain / sqrt(fan_in).

    Layers followed by ReLU use gain sqrt(6) (He-uniform); output layers use gain 1.
    """
    rng = np.random.default_rng(seed)
    bb = config.backbone
    params: Dict[str, Tensor] = {}
    relu_gain = np.sqrt(6.0)

    def add(name, shape, fan_in, gain):
        params[f"{name}.w"] = Tensor(_uniform(rng, shape, fan_in, gain), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(shape[0]), requires_grad=True, name=f"{name}.b")

    for stream in config.stream_names:
        c_prev = 3
        for i, c in enumerate(bb.channels):
            add(f"{stream}.conv{i}", (c, c_prev, 3, 3), c_prev * 9, relu_gain)
            c_prev = c
    c = bb.out_channels
    a = len(config.anchor_scales) * len(config.anchor_ratios)
    add("rpn.conv", (c, c, 3, 3), c * 9, relu_gain)
    add("rpn.cls", (2 * a, c, 1, 1), c, 1.0)
    add("rpn.reg", (4 * a, c, 1, 1), c, 1.0)
    add("head.cls", (config.num_classes, config.fused_dim), config.fused_dim, 1.0)
    if config.bbox_hidden:
        add("head.hidden", (config.bbox_hidden, 49 * c), 49 * c, relu_gain)
        add("head.bbox", (4, config.bbox_hidden), config.bbox_hidden, 1.0)
    else:
        add("head.bbox", (4, 49 * c), 49 * c, 1.0)
    hashes = None
    if config.fusion_kind == "compact":
        hashes = make_sketch_hashes(c, c, config.sketch_dim, config.sketch_seed)
    return TwoStreamModel(config, params, hashes)


# ---------------------------------------------------------------------------
# Training forward
# ---------------------------------------------------------------------------

def jitter_boxes(boxes: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` random perturbations of each box: centre shifts up to 25% of the side, log-scale up to 0.3."""
    if count <= 0 or len(boxes) == 0:
        return np.zeros((0, 4))
    b = np.repeat(boxes, count, axis=0)
    w, h = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    cx = b[:, 0] + w * (0.5 + rng.uniform(-0.25, 0.25, len(b)))
    cy = b[:, 1] + h * (0.5 + rng.uniform(-0.25, 0.25, len(b)))
    w, h = w * np.exp(rng.uniform(-0.3, 0.3, len(b))), h * np.exp(rng.uniform(-0.3, 0.3, len(b)))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def sample_rois(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                config: ModelConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Second-stage mini-batch: foreground at IoU >= roi_fg_iou, background 3:1.

    Returns RoIs, class labels (0 = background) and std-normalised deltas.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cand = np.vstack([np.asarray(proposals, dtype=np.float64).reshape(-1, 4), gt,
                      jitter_boxes(gt, config.roi_gt_jitter, rng)])
    if len(gt):
        ov = iou_matrix(cand, gt)
        best = ov.argmax(axis=1)
        best_iou = ov[np.arange(len(cand)), best]
    else:
        best = np.zeros(len(cand), dtype=np.int64)
        best_iou = np.zeros(len(cand))
    fg_idx = np.flatnonzero(best_iou >= config.roi_fg_iou)
    bg_idx = np.flatnonzero(best_iou < config.roi_fg_iou)
    n_fg = min(fg_idx.size, int(round(config.roi_batch * config.roi_fg_fraction)))
    n_bg = min(bg_idx.size, config.roi_batch - n_fg)
    fg = rng.choice(fg_idx, size=n_fg, replace=False) if n_fg else fg_idx[:0]
    bg = rng.choice(bg_idx, size=n_bg, replace=False) if n_bg else bg_idx[:0]
    keep = np.concatenate([fg, bg])
    rois = cand[keep]
    labels = np.zeros(len(keep), dtype=np.int64)
    targets = np.zeros((len(keep), 4))
    if n_fg:
        labels[:n_fg] = np.asarray(gt_labels, dtype=np.int64)[best[fg]]
        targets[:n_fg] = encode_box_deltas(cand[fg], gt[best[fg]]) / np.asarray(config.bbox_stds)
    return rois, labels, targets


def training_targets(model: TwoStreamModel, gt_boxes, image_shape: Tuple[int, int]) -> np.ndarray:
    """Ground-truth boxes enlarged by the (resolution-scaled) padding used for training."""
    pad = model.config.effective_enlarge_pad
    gt = [enlarge_box(b, pad, image_shape) for b in np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)]
    return np.asarray(gt, dtype=np.float64).reshape(-1, 4)


def forward_train(model: TwoStreamModel, image: np.ndarray, gt_boxes, gt_labels,
                  rng: Optional[np.random.Generator] = None, plan: Optional[TrainPlan] = None,
                  noise: Optional[np.ndarray] = None) -> Tuple[Tensor, LossBreakdown, TrainPlan]:
    """Loss of one training image (already at network resolution).

    ``gt_boxes`` are the tight ground-truth boxes; they are enlarged here.
    When ``plan`` is given its sampled anchors and RoIs are reused.
    """
    cfg = model.config
    h, w = image.shape[:2]
    feats = model.features(model.stream_inputs(image, noise))
    rpn_feat = feats[cfg.rpn_source]
    cls, reg = model.rpn(rpn_feat)
    _, fh, fw = rpn_feat.shape
    if plan is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        gt = training_targets(model, gt_boxes, (h, w))
        anchors = model.anchors(fh, fw)
        assignment = assign_anchor_labels(anchors, gt, (h, w), cfg.rpn_batch, rng, cfg.iou_pos, cfg.iou_neg)
        fg_prob = softmax(cls.data.astype(np.float64))[:, 1]
        proposals, _ = propose_rois(fg_prob, reg.data, anchors, (h, w), "train", cfg.rpn_nms,
                                    cfg.proposals_train, cfg.proposals_test, cfg.min_proposal_size)
        rois, labels, targets = sample_rois(proposals, gt, np.asarray(gt_labels).reshape(-1), cfg, rng)
        if len(rois) == 0:
            rois = np.array([[0.0, 0.0, float(w), float(h)]])
            labels = np.zeros(1, dtype=np.int64)
            targets = np.zeros((1, 4))
        plan = TrainPlan(assignment, rois, labels, targets, n_reg=fh * fw)
    l_rpn_cls, l_rpn_reg, _ = rpn_loss(cls, reg, plan.assignment, cfg.lam, plan.n_reg)
    pair = model.roi_features(feats, plan.rois)
    logits, deltas = model.heads(pair)
    total, breakdown = total_loss(l_rpn_cls, l_rpn_reg, logits, plan.roi_labels, deltas, plan.roi_targets,
                                  cfg.lam)
    return total, breakdown, plan


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def detect(model: TwoStreamModel, image) -> List[Detection]:
    """Detections in the coordinates of ``image`` (array or path), best first."""
    if not isinstance(image, np.ndarray):
        with Image.open(image) as im:
            image = np.asarray(im.convert("RGB"))
    image = np.ascontiguousarray(image, dtype=np.uint8)
    cfg = model.config
    oh, ow = image.shape[:2]
    resized = model.resize(image)
    h, w = resized.shape[:2]
    feats = model.features(model.stream_inputs(resized))
    rpn_feat = feats[cfg.rpn_source]
    cls, reg = model.rpn(rpn_feat)
    _, fh, fw = rpn_feat.shape
    fg_prob = softmax(cls.data.astype(np.float64))[:, 1]
    proposals, _ = propose_rois(fg_prob, reg.data, model.anchors(fh, fw), (h, w), "test", cfg.rpn_nms,
                                cfg.proposals_train, cfg.proposals_test, cfg.min_proposal_size)
    if len(proposals) == 0:
        return []
    pair = model.roi_features(feats, proposals)
    logits, deltas = model.heads(pair)
    probs = softmax(logits.data.astype(np.float64))
    boxes = decode_box_deltas(proposals, deltas.data.astype(np.float64) * np.asarray(cfg.bbox_stds), (h, w))
    boxes = clip_boxes(boxes * np.array([ow / w, oh / h, ow / w, oh / h]), (oh, ow))
    found = []
    for k in range(1, cfg.num_classes):
        sel = np.flatnonzero(probs[:, k] >= cfg.score_floor)
        if sel.size == 0:
            continue
        for i in sel[nms(boxes[sel], probs[sel, k], cfg.nms)]:
            found.append((-probs[i, k], k, int(i)))
    found.sort()
    dets = []
    for neg_score, k, i in found[: cfg.max_detections]:
        dets.append(Detection(tuple(float(v) for v in boxes[i]), cfg.class_names[k], float(-neg_score), k))
    return dets


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(model: TwoStreamModel, path) -> None:
    meta = {"format": "tamperlab-detector", "version": 1, "config": model.config.to_json()}
    raw = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)
    tensors = {META_KEY: raw}
    tensors.update({k: v.data for k, v in model.params.items()})
    if model.hashes is not None:
        hs = model.hashes
        tensors["sketch.h_rgb"] = hs.h_rgb.astype(np.float32)
        tensors["sketch.s_rgb"] = hs.s_rgb.astype(np.float32)
        tensors["sketch.h_n"] = hs.h_n.astype(np.float32)
        tensors["sketch.s_n"] = hs.s_n.astype(np.float32)
    save_tensors(path, tensors)


def load_model(path) -> TwoStreamModel:
    raw = load_tensors(path)
    if META_KEY not in raw:
        raise ValueError(f"{path}: checkpoint has no metadata block")
    meta = json.loads(raw.pop(META_KEY).astype(np.uint8).tobytes().decode("utf-8"))
    config = ModelConfig.from_json(meta["config"])
    hashes = None
    if "sketch.h_rgb" in raw:
        hashes = SketchHashes(raw.pop("sketch.h_rgb").astype(np.int64), raw.pop("sketch.s_rgb").astype(np.float64),
                              raw.pop("sketch.h_n").astype(np.int64), raw.pop("sketch.s_n").astype(np.float64),
                              config.sketch_dim)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    return TwoStreamModel(config, params, hashes)
