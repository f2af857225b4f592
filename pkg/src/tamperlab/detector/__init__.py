"""Two-stream region-proposal detector."""

from .boxes import (
    AnchorAssignment, AnchorSet, assign_anchor_labels, clip_boxes, decode_box_deltas, encode_box_deltas,
    enlarge_box, generate_anchors, iou, iou_matrix, nms, propose_rois,
)
from .layers import (
    RoiFeaturePair, SketchHashes, bilinear_fuse, bilinear_pool, compact_bilinear_fuse, compact_bilinear_pool,
    count_sketch, make_sketch_hashes, roi_pool,
)
from .losses import LossBreakdown, rpn_loss, total_loss
from .model import (
    BackboneConfig, Detection, ModelConfig, TrainPlan, TwoStreamModel, build_two_stream, detect, forward_train,
    load_model, sample_rois, save_model,
)
