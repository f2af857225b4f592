import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tamperlab import forensic_eval as fe
from tamperlab import gradcheck
from tamperlab.detector import build_two_stream, iou_matrix
from tamperlab.detector.model import Detection
from tamperlab.tamper_synth import TamperSample, mask_boxes

from oracles import auc_pairs, f1_sweep, voc_ap


def _scores_and_gt(rng, n):
    scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))  # coarse rounding makes ties
    gt = rng.uniform(size=n) < rng.uniform(0.1, 0.9)
    gt[0], gt[1] = True, False
    return scores, gt


# --- pixel metrics ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(200))
def test_f1_and_auc_match_oracles(seed):
    rng = np.random.default_rng(seed)
    scores, gt = _scores_and_gt(rng, int(rng.integers(2, 120)))
    f1, thr = fe.f1_best_threshold(scores, gt)
    assert abs(f1 - f1_sweep(scores, gt)) <= 1e-9
    pred = scores >= thr
    assert abs(2 * (pred & gt).sum() / (pred.sum() + gt.sum()) - f1) <= 1e-9
    assert abs(fe.pixel_auc(scores, gt) - auc_pairs(scores, gt)) <= 1e-9


def test_pixel_metric_examples():
    gt = np.array([1, 1, 0, 0], bool)
    assert fe.f1_best_threshold(np.array([0.9, 0.8, 0.1, 0.0]), gt) == (1.0, 0.8)
    assert fe.pixel_auc(np.array([0.9, 0.8, 0.1, 0.0]), gt) == 1.0
    assert fe.pixel_auc(np.zeros(4), gt) == 0.5
    assert fe.f1_best_threshold(np.zeros(4), np.zeros(4, bool)) is None
    assert fe.pixel_auc(np.zeros(4), np.ones(4, bool)) is None
    # all-zero score map: threshold 0 marks everything positive
    assert fe.f1_best_threshold(np.zeros(4), gt) == (pytest.approx(2 / 3), 0.0)
    with pytest.raises(ValueError):
        fe.pixel_auc(np.zeros(3), gt)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pixel_metrics_invariant_to_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    scores, gt = _scores_and_gt(rng, 50)
    mapped = np.exp(3 * scores) - 1  # strictly increasing, fixes 0
    assert fe.pixel_auc(mapped, gt) == pytest.approx(fe.pixel_auc(scores, gt), abs=1e-12)
    assert fe.f1_best_threshold(mapped, gt)[0] == pytest.approx(fe.f1_best_threshold(scores, gt)[0], abs=1e-12)
    assert fe.pixel_auc(-scores, gt) == pytest.approx(1 - fe.pixel_auc(scores, gt), abs=1e-12)
    assert fe.pixel_auc(scores, ~gt) == pytest.approx(1 - fe.pixel_auc(scores, gt), abs=1e-12)


def test_rasterize_uses_pixel_centres_and_max():
    dets = [((1.0, 1.0, 3.0, 4.0), 0.5), ((2.6, 0.0, 2.9, 10.0), 0.9), ((2.0, 2.0, 5.0, 5.0), 0.7)]
    out = fe.rasterize_detections(dets, (6, 6))
    expected = np.zeros((6, 6))
    expected[1:4, 1:3] = 0.5
    expected[2:5, 2:5] = 0.7
    np.testing.assert_array_equal(out, expected)  # the thin box covers no pixel centre
    d = Detection((0.0, 0.0, 100.0, 100.0), "tampered", 0.3, 1)
    np.testing.assert_array_equal(fe.rasterize_detections([d], (2, 3)), 0.3)


# --- detection AP ----------------------------------------------------------------

def _random_detection_case(rng):
    n_img = int(rng.integers(1, 5))
    gts, dets = {}, []
    for i in range(n_img):
        k = int(rng.integers(0, 4))
        xy = rng.uniform(0, 60, size=(k, 2))
        gts[i] = [list(np.r_[p, p + rng.uniform(5, 30, 2)]) for p in xy]
        for _ in range(int(rng.integers(0, 6))):
            if gts[i] and rng.random() < 0.6:
                g = np.asarray(gts[i][rng.integers(len(gts[i]))])
                box = g + rng.normal(0, 3, 4)
            else:
                p = rng.uniform(0, 60, 2)
                box = np.r_[p, p + rng.uniform(5, 30, 2)]
            dets.append((i, float(np.round(rng.uniform(), 1)), [float(v) for v in box]))
    return n_img, gts, dets


@pytest.mark.parametrize("seed", range(200))
def test_ap_matches_voc_oracle(seed):
    rng = np.random.default_rng(seed)
    n_img, gts, dets = _random_detection_case(rng)
    if not any(gts.values()):
        gts[0] = [[0.0, 0.0, 10.0, 10.0]]
    per_image = [[(b, "t", s) for i, s, b in dets if i == img] for img in range(n_img)]
    gt_boxes = [[(*b, "t") for b in gts[img]] for img in range(n_img)]
    res = fe.detection_ap(per_image, gt_boxes)
    flat = [(i, s, b) for i in range(n_img) for (b, _, s) in per_image[i]]
    assert abs(res.ap50_per_class["t"] - voc_ap(flat, gts, 0.5)) <= 1e-9
    coco = np.mean([voc_ap(flat, gts, t) for t in fe.COCO_IOUS])
    assert abs(res.ap_per_class["t"] - coco) <= 1e-9


def test_hand_computed_ap():
    gt = [[(0, 0, 10, 10, "t")], [(0, 0, 10, 10, "t")], [(0, 0, 10, 10, "t")]]
    dets = [[((0, 0, 10, 10), "t", 0.9)], [((50, 50, 60, 60), "t", 0.8)], [((0, 0, 10, 10), "t", 0.7)]]
    res = fe.detection_ap(dets, gt)
    assert res.ap50_per_class["t"] == pytest.approx(5 / 9)
    assert res.mean_ap == pytest.approx(5 / 9)  # exact boxes match at every IoU threshold


def test_ap_edge_cases():
    gt = [[(0, 0, 10, 10, "t")]]
    assert fe.detection_ap([[]], gt).mean_ap50 == 0.0
    assert fe.detection_ap([[((0, 0, 10, 10), "t", 0.5)]], gt).mean_ap50 == 1.0
    # duplicates of one object count as false positives
    dup = [[((0, 0, 10, 10), "t", 0.9), ((0, 0, 10, 10), "t", 0.8)]]
    assert fe.detection_ap(dup, gt).mean_ap50 == 1.0
    # detections of a class absent from the ground truth are ignored
    assert fe.detection_ap([[((0, 0, 10, 10), "x", 0.9)]], gt).ap50_per_class == {"t": 0.0}
    with pytest.raises(ValueError):
        fe.detection_ap([[], []], gt)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_properties(seed):
    rng = np.random.default_rng(seed)
    n_img, gts, dets = _random_detection_case(rng)
    gts[0] = gts[0] or [[0.0, 0.0, 10.0, 10.0]]
    gt_boxes = [[(*b, "t") for b in gts[img]] for img in range(n_img)]

    def ap(ds, scale=1.0):
        per = [[(b, "t", s * scale) for i, s, b in ds if i == img] for img in range(n_img)]
        return fe.detection_ap(per, gt_boxes).mean_ap50

    base = ap(dets)
    assert ap(dets, 0.37) == pytest.approx(base, abs=1e-12)
    with_fp = dets + [(0, 1.0, [200.0, 200.0, 210.0, 210.0])]
    assert ap(with_fp) <= base + 1e-12
    # a correct detection for a so-far unmatched object, scored above everything, cannot lower AP
    target = np.asarray(gts[0][0])
    rest = [d for d in dets if d[0] != 0 or iou_matrix(np.array([d[2]]), target[None])[0, 0] < 0.5]
    assert ap([(0, 2.0, list(map(float, target)))] + rest) >= ap(rest) - 1e-12


# --- manifest evaluation ---------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_setup():
    rng = np.random.default_rng(0)
    samples = []
    for i in range(3):
        img = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
        mask = np.zeros((32, 32), bool)
        if i < 2:
            mask[4 + i:20, 6:22 + i] = True
        tech = "splice" if i < 2 else "authentic"
        samples.append(TamperSample(img, mask, mask_boxes(mask, tech), tech))
    return build_two_stream(gradcheck.tiny_model_config(), seed=1), samples


def test_report_fields_and_json(tiny_setup, tmp_path):
    model, samples = tiny_setup
    rep = fe.evaluate_manifest(model, samples)
    assert rep.sample_count == 3 and rep.pixel_count == 2
    assert set(rep.ap_per_class) == {"tampered"}
    assert 0 <= rep.mean_ap <= rep.mean_ap50 <= 1 or rep.mean_ap50 == 0
    data = json.loads(rep.write(tmp_path / "r.json").read_text())
    assert data["report"]["sample_count"] == 3 and "meta" in data
    assert set(rep.f1_by_technique) <= {"splice"}


def test_attack_reports(tiny_setup):
    model, samples = tiny_setup
    rep = fe.evaluate_manifest(model, samples, attacks=["jpeg70", "jpeg50", "resize0.7", "resize0.5"])
    assert list(rep.attacks) == ["jpeg70", "jpeg50", "resize0.7", "resize0.5"]
    for sub in rep.attacks.values():
        assert sub.sample_count == 3 and not sub.attacks
    same = fe.evaluate_manifest(model, samples, attacks=["resize1.0"])
    clean = fe.evaluate_manifest(model, samples)
    assert same.attacks["resize1.0"].as_dict() == clean.as_dict()


def test_parallel_evaluation_matches_serial(tiny_setup):
    model, samples = tiny_setup
    assert fe.evaluate_manifest(model, samples, jobs=2).as_dict() == fe.evaluate_manifest(model, samples).as_dict()


def test_mode_mismatch_is_reported_before_detection(tiny_setup):
    _, samples = tiny_setup
    multi = build_two_stream(gradcheck.tiny_model_config(mode="multi-class"), seed=0)
    bad = [TamperSample(s.image, s.mask, [(*b[:4], "tampered") for b in s.boxes], s.technique) for s in samples]
    with pytest.raises(ValueError, match="mode"):
        fe.evaluate_manifest(multi, bad)
