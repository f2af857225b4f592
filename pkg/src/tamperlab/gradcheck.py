"""Finite-difference gradient suite for the differentiable ops and the full detector loss."""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import tensor_core as tc
from .detector.layers import bilinear_fuse, compact_bilinear_fuse, make_sketch_hashes, roi_pool
from .detector.model import BackboneConfig, ModelConfig, TwoStreamModel, build_two_stream, forward_train
from .tensor_core import Tensor, finite_difference_check

OP_TOLERANCE = 1e-4
GRAPH_TOLERANCE = 1e-3

Case = Tuple[Callable[..., Tensor], List[np.ndarray]]


def op_cases(seed: int = 0) -> Dict[str, Case]:
    """One scalar-valued probe per differentiable op, on small float64 inputs."""
    rng = np.random.default_rng(seed)
    n = rng.normal
    # 36 products into 4 bins leave no bin at 0, where the signed sqrt has a kink
    hs = make_sketch_hashes(6, 6, 4, seed)
    boxes = np.array([[3.0, 2.0, 40.0, 33.0], [0.0, 0.0, 20.0, 56.0]])
    return {
        "add": (lambda a, b: tc.tensor_sum(tc.add(a, b)), [n(size=(3, 2)), n(size=(3, 2))]),
        "scale": (lambda a: tc.tensor_sum(tc.scale(a, -2.5)), [n(size=4)]),
        "add_n": (lambda a, b: tc.tensor_sum(tc.add_n([a, b, a])), [n(size=3), n(size=3)]),
        "reshape_transpose": (lambda a: tc.softmax_cross_entropy(
            tc.transpose(tc.reshape(a, (3, 4)), (1, 0)), [0, 1, 2, 0]), [n(size=12)]),
        "take_rows": (lambda a: tc.softmax_cross_entropy(tc.take_rows(a, np.array([2, 0, 2])), [1, 0, 1]),
                      [n(size=(4, 3))]),
        "relu": (lambda a: tc.smooth_l1_loss(tc.relu(a), np.zeros((5, 4))), [n(size=(5, 4))]),
        "linear": (lambda x, w, b: tc.softmax_cross_entropy(tc.linear(x, w, b), [0, 2, 1]),
                   [n(size=(3, 5)), n(size=(3, 5)), n(size=3)]),
        "conv2d": (lambda x, w, b: tc.smooth_l1_loss(tc.conv2d(x, w, b, 1, 1), np.zeros((3, 6, 5))),
                   [n(size=(2, 6, 5)), n(size=(3, 2, 3, 3)), n(size=3)]),
        "conv2d_strided": (lambda x, w, b: tc.smooth_l1_loss(tc.conv2d(x, w, b, 2, 0), np.zeros((2, 3, 3))),
                           [n(size=(2, 7, 7)), n(size=(2, 2, 3, 3)), n(size=2)]),
        "maxpool2d": (lambda x: tc.smooth_l1_loss(tc.maxpool2d(x), np.zeros((2, 3, 4))), [n(size=(2, 6, 8))]),
        "softmax_cross_entropy": (lambda z: tc.softmax_cross_entropy(z, [1, 0, 3]), [n(size=(3, 4))]),
        "smooth_l1": (lambda a: tc.smooth_l1_loss(a, np.zeros(6)), [np.array([-2.0, -0.4, 0.3, 0.9, 1.5, 3.0])]),
        "signed_sqrt_l2norm": (lambda a: tc.softmax_cross_entropy(tc.signed_sqrt_l2norm(a), [2, 0]),
                               [n(size=(2, 5))]),
        "roi_pool": (lambda f: tc.smooth_l1_loss(roi_pool(f, boxes, 8), np.zeros((2, 49, 2))),
                     [n(size=(2, 8, 8))]),
        "bilinear_fuse": (lambda a, b: tc.softmax_cross_entropy(bilinear_fuse(a, b), [1, 7]),
                          [n(size=(2, 6, 3)), n(size=(2, 6, 4))]),
        "compact_bilinear_fuse": (lambda a, b: tc.softmax_cross_entropy(compact_bilinear_fuse(a, b, hs), [3, 1]),
                                  [n(size=(2, 5, 6)), n(size=(2, 5, 6))]),
    }


def check_ops(seed: int = 0, epsilon: float = 1e-6) -> Dict[str, float]:
    return {name: finite_difference_check(fn, inputs, epsilon=epsilon)
            for name, (fn, inputs) in op_cases(seed).items()}


def tiny_model_config(**overrides) -> ModelConfig:
    """Two channels per stage on 32 px inputs: every weight can be probed in seconds."""
    return ModelConfig(backbone=BackboneConfig(channels=(2, 2, 2, 2), input_size=32), proposals_test=20, **overrides)


def _toy_image(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    # textured everywhere: flat regions create max-pool ties where the loss has kinks
    img = rng.integers(40, 200, size=(32, 32, 3))
    img[8:22, 10:26] = rng.integers(0, 255, size=3) // 2 + rng.integers(0, 128, size=(14, 16, 3))
    img = img.astype(np.uint8)
    return img, np.array([[10.0, 8.0, 26.0, 22.0]])


def check_full_graph(seed: int = 0, epsilon: float = 1e-6, config: ModelConfig = None) -> float:
    """Max relative error of d l_total / d theta over every parameter of a tiny two-stream model.

    Anchor and RoI sampling are frozen in a ``TrainPlan`` so the loss is a
    function of the weights alone.
    """
    config = config if config is not None else tiny_model_config()
    rng = np.random.default_rng(seed)
    model = build_two_stream(config, seed=seed)
    names = sorted(model.params)
    params64 = {k: Tensor(model.params[k].data, dtype=np.float64) for k in names}
    model64 = TwoStreamModel(config, params64, model.hashes)
    image, gt = _toy_image(rng)
    _, _, plan = forward_train(model64, image, gt, [1], rng=np.random.default_rng(seed))

    def loss(*xs):
        m = model64.with_params(dict(zip(names, xs)))
        return forward_train(m, image, gt, [1], plan=plan)[0]

    return finite_difference_check(loss, [params64[k].data for k in names], epsilon=epsilon)
