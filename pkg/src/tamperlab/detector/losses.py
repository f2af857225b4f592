"""RPN loss and the combined training loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from ..tensor_core import Tensor, add_n, scale, smooth_l1_loss, softmax_cross_entropy, take_rows
from .boxes import POSITIVE, AnchorAssignment

RPN_LAMBDA = 10.0


def _zero(dtype=np.float32) -> Tensor:
    return Tensor(0.0, dtype=dtype)


@dataclass(frozen=True)
class LossBreakdown:
    l_rpn_cls: float
    l_rpn_reg: float  # already weighted by lambda / N_reg
    l_tamper: float
    l_bbox: float
    l_total: float
    lam: float = RPN_LAMBDA

    @classmethod
    def from_components(cls, l_rpn_cls: float, l_rpn_reg: float, l_tamper: float, l_bbox: float,
                        lam: float = RPN_LAMBDA) -> "LossBreakdown":
        total = float(l_rpn_cls) + float(l_rpn_reg) + float(l_tamper) + float(l_bbox)
        return cls(float(l_rpn_cls), float(l_rpn_reg), float(l_tamper), float(l_bbox), total, lam)

    @property
    def l_rpn(self) -> float:
        return self.l_rpn_cls + self.l_rpn_reg

    def as_dict(self) -> dict:
        return asdict(self)


def rpn_loss(cls_logits: Tensor, deltas: Tensor, assignment: AnchorAssignment,
             lam: float = RPN_LAMBDA, n_reg: Optional[int] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """(1/N_cls) sum CE over the sampled anchors + lam (1/N_reg) sum smooth-L1 over sampled positives.

    ``n_reg`` defaults to the number of anchors. Returns the two terms (the
    second already lambda-weighted) and their sum.
    """
    n_reg = len(assignment.labels) if n_reg is None else n_reg
    sampled = assignment.sampled
    labels = (assignment.labels[sampled] == POSITIVE).astype(np.int64)
    l_cls = softmax_cross_entropy(take_rows(cls_logits, sampled), labels)
    pos = assignment.sampled_positive
    if pos.size:
        reg = smooth_l1_loss(take_rows(deltas, pos), assignment.targets[pos].astype(deltas.data.dtype))
        l_reg = scale(reg, lam / n_reg)
    else:
        l_reg = _zero(deltas.data.dtype)
    return l_cls, l_reg, add_n([l_cls, l_reg])


def total_loss(l_rpn_cls: Tensor, l_rpn_reg: Tensor, class_logits: Tensor, class_labels: np.ndarray,
               box_deltas: Tensor, box_targets: np.ndarray, lam: float = RPN_LAMBDA
               ) -> Tuple[Tensor, LossBreakdown]:
    """L_total = L_RPN + L_tamper + L_bbox.

    L_bbox is the smooth-L1 of the box head over foreground RoIs (label > 0),
    divided by the foreground count; it is zero when there is no foreground.
    """
    class_labels = np.asarray(class_labels, dtype=np.int64)
    l_tamper = softmax_cross_entropy(class_logits, class_labels)
    fg = np.flatnonzero(class_labels > 0)
    if fg.size:
        l_bbox = scale(smooth_l1_loss(take_rows(box_deltas, fg), np.asarray(box_targets)[fg]
                                      .astype(box_deltas.data.dtype)), 1.0 / fg.size)
    else:
        l_bbox = _zero(box_deltas.data.dtype)
    total = add_n([l_rpn_cls, l_rpn_reg, l_tamper, l_bbox])
    breakdown = LossBreakdown.from_components(l_rpn_cls.item(), l_rpn_reg.item(), l_tamper.item(),
                                              l_bbox.item(), lam)
    return total, breakdown
