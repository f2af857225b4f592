import numpy as np
import pytest
from PIL import Image

from tamperlab.detector.model import Detection
from tamperlab.render import CLASS_COLORS, box_band, dashed_outline, render_overlay


def _image(seed=0, shape=(40, 50)):
    return np.random.default_rng(seed).integers(0, 256, size=(*shape, 3)).astype(np.uint8)


def _read(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def test_zero_detections_leave_pixels_unchanged(tmp_path):
    img = _image()
    np.testing.assert_array_equal(_read(render_overlay(img, [], tmp_path / "a.png")), img)
    np.testing.assert_array_equal(_read(render_overlay(img, [], tmp_path / "h.png", heatmap=True)), img)


def test_gt_boxes_only_add_white_dashes(tmp_path):
    img = _image()
    out = _read(render_overlay(img, [], tmp_path / "a.png", gt_boxes=[(5, 6, 30, 25, "splice")]))
    dashes = dashed_outline((5, 6, 30, 25), img.shape[:2])
    assert dashes.sum() > 0
    np.testing.assert_array_equal(out[dashes], 255)
    np.testing.assert_array_equal(out[~dashes], img[~dashes])
    # dashes alternate: the first pixel of a side is on, the fifth is off
    assert dashes[6, 5] and not dashes[6, 9]


@pytest.mark.parametrize("label", sorted(CLASS_COLORS))
def test_one_detection_recolours_exactly_the_band(tmp_path, label):
    img = _image(1)
    det = Detection((10.0, 8.0, 31.0, 27.0), label, 0.9, 1)
    out = _read(render_overlay(img, [det], tmp_path / "a.png", show_scores=False))
    band = box_band(det.box, img.shape[:2])
    assert band.sum() == 2 * 2 * (21 + 19) - 16  # perimeter band of a 21x19 box, 2 px wide
    np.testing.assert_array_equal(out[band], np.broadcast_to(CLASS_COLORS[label], (band.sum(), 3)))
    np.testing.assert_array_equal(out[~band], img[~band])


def test_band_is_clamped_to_the_image():
    band = box_band((-5, -5, 6, 6), (10, 10))  # band of the clamped box [0, 6) x [0, 6)
    assert band[:6, :6].sum() == 36 - 4 and not band[6:].any() and not band[:, 6:].any()
    assert not box_band((3, 3, 3, 9), (10, 10)).any()


def test_scores_and_heatmap(tmp_path):
    img = np.full((40, 40, 3), 100, np.uint8)
    dets = [((5, 5, 35, 35), "tampered", 0.8)]
    plain = _read(render_overlay(img, dets, tmp_path / "p.png", show_scores=False))
    text = _read(render_overlay(img, dets, tmp_path / "t.png"))
    inside = np.zeros((40, 40), bool)
    inside[7:33, 7:33] = True
    assert (text[inside] != plain[inside]).any()  # score text drawn inside the band
    heat = _read(render_overlay(img, dets, tmp_path / "h.png", heatmap=True, show_scores=False))
    np.testing.assert_array_equal(heat[20, 20], [round(100 * 0.6 + 255 * 0.4), 60, 60])
    np.testing.assert_array_equal(heat[0, 0], [100, 100, 100])


def test_rendering_is_byte_deterministic(tmp_path):
    img = _image(2)
    dets = [Detection((3.2, 4.7, 20.1, 30.0), "copy_move", 0.55, 2), Detection((0, 0, 49, 39), "removal", 0.1, 3)]
    a = render_overlay(img, dets, tmp_path / "a.png", gt_boxes=[(1, 1, 9, 9)], heatmap=True)
    b = render_overlay(img, dets, tmp_path / "b.png", gt_boxes=[(1, 1, 9, 9)], heatmap=True)
    assert a.read_bytes() == b.read_bytes()
