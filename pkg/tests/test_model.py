import numpy as np
import pytest

from tamperlab import gradcheck
from tamperlab.detector import model as md
from tamperlab.detector.boxes import iou_matrix
from tamperlab.detector.train import class_ids
from tamperlab.forensic_eval import gt_for_model
from tamperlab.tamper_synth import TamperSample
from tamperlab.tensor_core import Tensor


@pytest.fixture(scope="module")
def tiny():
    return md.build_two_stream(gradcheck.tiny_model_config(), seed=3)


def _image(seed=0, size=32):
    return np.random.default_rng(seed).integers(0, 256, size=(size, size, 3)).astype(np.uint8)


@pytest.mark.parametrize("mode,width", [("two-class", 2), ("multi-class", 4)])
def test_head_widths(mode, width):
    m = md.build_two_stream(gradcheck.tiny_model_config(mode=mode), seed=0)
    feats = m.features(m.stream_inputs(_image()))
    logits, deltas = m.heads(m.roi_features(feats, np.array([[0, 0, 16, 16], [4, 4, 30, 20.0]])))
    assert logits.shape == (2, width) and deltas.shape == (2, 4)


def test_default_fused_width_and_scale():
    cfg = md.ModelConfig()
    assert cfg.fusion_kind == "full" and cfg.fused_dim == 64 * 64
    assert cfg.effective_fusion_scale == 64
    wide = md.ModelConfig(backbone=md.BackboneConfig(channels=(8, 256)))
    assert wide.fusion_kind == "compact" and wide.fused_dim == 16384


def test_enlarge_pad_scales_with_resolution():
    assert md.ModelConfig(backbone=md.BackboneConfig(input_size=600)).effective_enlarge_pad == 20
    assert md.ModelConfig().effective_enlarge_pad == pytest.approx(20 * 128 / 600)


def test_config_validation():
    with pytest.raises(ValueError):
        md.ModelConfig(mode="three-class")
    with pytest.raises(ValueError):
        md.BackboneConfig(channels=(4, 4, 4), input_size=30)
    with pytest.raises(ValueError):
        md.ModelConfig.from_json({"nonsense": 1})
    cfg = md.ModelConfig(streams="rgb", fusion_scale=8.0)
    assert md.ModelConfig.from_json(cfg.to_json()) == cfg


def test_zero_image_gives_finite_outputs(tiny):
    img = np.zeros((32, 32, 3), np.uint8)
    feats = tiny.features(tiny.stream_inputs(img))
    cls, reg = tiny.rpn(feats["rgb"])
    assert np.isfinite(cls.data).all() and np.isfinite(reg.data).all()
    logits, deltas = tiny.heads(tiny.roi_features(feats, np.array([[0.0, 0.0, 32.0, 32.0]])))
    assert np.isfinite(logits.data).all() and np.isfinite(deltas.data).all()
    for d in md.detect(tiny, img):
        assert np.isfinite(d.box).all()


def test_detect_is_deterministic_and_well_formed(tiny):
    img = _image(1, 48)
    a, b = md.detect(tiny, img), md.detect(tiny, img.copy())
    assert [d.as_dict() for d in a] == [d.as_dict() for d in b]
    scores = [d.score for d in a]
    assert scores == sorted(scores, reverse=True)
    for d in a:
        x1, y1, x2, y2 = d.box
        assert 0 <= x1 <= x2 <= 48 and 0 <= y1 <= y2 <= 48
        assert d.score >= tiny.config.score_floor and d.label == "tampered"
    boxes = np.array([d.box for d in a]).reshape(-1, 4)
    if len(boxes) > 1:
        m = iou_matrix(boxes, boxes)
        np.fill_diagonal(m, 0)
        assert (m <= tiny.config.nms).all()


def test_detect_reads_image_files(tmp_path, tiny):
    from PIL import Image
    img = _image(2)
    Image.fromarray(img).save(tmp_path / "x.png")
    assert [d.as_dict() for d in md.detect(tiny, tmp_path / "x.png")] == [d.as_dict() for d in md.detect(tiny, img)]
    with pytest.raises(OSError):
        md.detect(tiny, tmp_path / "missing.png")


def test_checkpoint_round_trip_gives_identical_detections(tmp_path, tiny):
    path = tmp_path / "m.tmpl"
    md.save_model(tiny, path)
    back = md.load_model(path)
    assert back.config == tiny.config
    img = _image(4, 40)
    assert repr([d.as_dict() for d in md.detect(back, img)]) == repr([d.as_dict() for d in md.detect(tiny, img)])


def test_compact_checkpoint_keeps_hashes(tmp_path):
    cfg = gradcheck.tiny_model_config(fusion="compact", sketch_dim=64)
    m = md.build_two_stream(cfg, seed=0)
    md.save_model(m, tmp_path / "c.tmpl")
    back = md.load_model(tmp_path / "c.tmpl")
    np.testing.assert_array_equal(back.hashes.h_rgb, m.hashes.h_rgb)
    np.testing.assert_array_equal(back.hashes.s_n, m.hashes.s_n)


def test_checkpoint_without_metadata_is_rejected(tmp_path):
    from tamperlab.tensor_core import save_tensors
    save_tensors(tmp_path / "x.tmpl", {"a": np.zeros(2)})
    with pytest.raises(ValueError, match="metadata"):
        md.load_model(tmp_path / "x.tmpl")


def test_single_stream_models():
    for streams in ("rgb", "noise"):
        m = md.build_two_stream(gradcheck.tiny_model_config(streams=streams), seed=0)
        assert {k.split(".")[0] for k in m.params} == {streams, "rpn", "head"}
        assert m.config.rpn_source == streams
        md.detect(m, _image())


def test_jittered_boxes_spread_around_gt():
    rng = np.random.default_rng(0)
    gt = np.array([[20.0, 30.0, 60.0, 80.0]])
    j = md.jitter_boxes(gt, 500, rng)
    ov = iou_matrix(j, gt)[:, 0]
    assert j.shape == (500, 4) and (j[:, 2] > j[:, 0]).all()
    assert 0.2 < (ov >= 0.5).mean() < 0.95 and ov.min() > 0.1
    assert md.jitter_boxes(gt, 0, rng).shape == (0, 4)


def test_sample_rois_fills_foreground_quota():
    cfg = md.ModelConfig()
    gt = np.array([[20.0, 30.0, 60.0, 80.0]])
    rois, labels, targets = md.sample_rois(np.array([[0.0, 0, 10, 10], [90, 90, 120, 120]]), gt, np.array([1]),
                                           cfg, np.random.default_rng(0))
    n_fg = int((labels > 0).sum())
    assert 8 <= n_fg <= 16 and len(labels) <= 64
    assert (iou_matrix(rois[:n_fg], gt) >= 0.5).all() and (iou_matrix(rois[n_fg:], gt) < 0.5).all()
    assert not targets[n_fg:].any()


def test_forward_train_plan_is_reused(tiny):
    img = _image(5)
    gt = np.array([[6.0, 4.0, 20.0, 18.0]])
    t1, b1, plan = md.forward_train(tiny, img, gt, [1], np.random.default_rng(0))
    t2, b2, _ = md.forward_train(tiny, img, gt, [1], plan=plan)
    assert b1 == b2 and np.isfinite(b1.l_total)


def test_full_graph_gradient():
    assert gradcheck.check_full_graph() < gradcheck.GRAPH_TOLERANCE


def test_hidden_box_head():
    m = md.build_two_stream(gradcheck.tiny_model_config(bbox_hidden=5), seed=0)
    assert m.params["head.hidden.w"].shape == (5, 49 * 2) and m.params["head.bbox.w"].shape == (4, 5)
    feats = m.features(m.stream_inputs(_image()))
    _, deltas = m.heads(m.roi_features(feats, np.array([[0, 0, 16, 16.0]])))
    assert deltas.shape == (1, 4)
    assert gradcheck.check_full_graph(config=gradcheck.tiny_model_config(bbox_hidden=3)) < gradcheck.GRAPH_TOLERANCE


def test_gt_label_mode_mismatch():
    sample = TamperSample(np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8), bool), [(0, 0, 4, 4, "blur")], "splice")
    multi = md.build_two_stream(gradcheck.tiny_model_config(mode="multi-class"), seed=0)
    with pytest.raises(ValueError, match="blur"):
        gt_for_model(multi, sample)
    with pytest.raises(ValueError):
        class_ids(multi, sample)
    two = md.build_two_stream(gradcheck.tiny_model_config(), seed=0)
    assert class_ids(two, sample).tolist() == [1]
