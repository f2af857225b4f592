import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tamperlab import tensor_core as tc
from tamperlab.detector import layers as ly
from tamperlab.tensor_core import Tensor, finite_difference_check

from oracles import roi_pool_loops


# --- RoI pooling -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(200))
def test_roi_pool_matches_bin_scan(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 5))
    fh, fw = rng.integers(3, 17, size=2)
    stride = int(rng.choice([1, 4, 8]))
    feats = rng.normal(size=(c, fh, fw)).astype(np.float32)
    if seed % 4 == 0:
        feats = np.round(feats)  # plenty of ties
    n = int(rng.integers(1, 6))
    x1 = rng.uniform(-stride, fw * stride, size=n)
    y1 = rng.uniform(-stride, fh * stride, size=n)
    boxes = np.stack([x1, y1, x1 + rng.uniform(1, fw * stride, size=n), y1 + rng.uniform(1, fh * stride, size=n)], 1)
    got = ly.roi_pool(Tensor(feats), boxes, stride).data
    np.testing.assert_array_equal(got, roi_pool_loops(feats, boxes, stride).astype(np.float32))


def test_roi_pool_exact_window_is_identity():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(3, 10, 12)).astype(np.float32)
    out = ly.roi_pool(Tensor(feats), [[2 * 8, 1 * 8, 9 * 8, 8 * 8]], 8).data
    expected = feats[:, 1:8, 2:9].reshape(3, 49).T
    np.testing.assert_array_equal(out[0], expected)


def test_roi_pool_constant_map_and_empty_box():
    feats = np.full((2, 6, 6), 3.5, dtype=np.float32)
    out = ly.roi_pool(Tensor(feats), [[3, 5, 30, 41], [100, 100, 120, 120]], 8).data
    np.testing.assert_array_equal(out[0], 3.5)
    np.testing.assert_array_equal(out[1], 0)


def test_roi_pool_shape_and_no_rois():
    out = ly.roi_pool(Tensor(np.ones((4, 5, 5))), np.zeros((0, 4)), 8)
    assert out.shape == (0, 49, 4)


def test_roi_pool_gradient():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(2, 9, 9))
    boxes = np.array([[4.0, 3.0, 60.0, 50.0], [0.0, 0.0, 20.0, 70.0]])
    target = rng.normal(size=(2, 49, 2))
    err = finite_difference_check(lambda f: tc.smooth_l1_loss(ly.roi_pool(f, boxes, 8), target), [feats],
                                  epsilon=1e-6)
    assert err < 1e-4


def test_roi_pool_gradient_routes_to_argmax():
    feats = np.zeros((1, 7, 7))
    feats[0, 3, 4] = 5.0
    t = Tensor(feats, requires_grad=True, dtype=np.float64)
    with tc.Tape() as tape:
        loss = tc.tensor_sum(ly.roi_pool(t, [[0, 0, 7, 7]], 1, output=1))
    tc.backward_pass(tape, loss)
    assert t.grad[0, 3, 4] == 1 and t.grad.sum() == 1


# --- full bilinear -------------------------------------------------------------

def test_bilinear_pool_hand_case():
    a = Tensor(np.array([[[1.0, 0.0]]]))
    b = Tensor(np.array([[[0.0, 1.0]]]))
    np.testing.assert_array_equal(ly.bilinear_pool(a, b).data[0], [[0, 1], [0, 0]])


def test_bilinear_fuse_zero_noise_is_zero_and_length():
    rng = np.random.default_rng(0)
    a = Tensor(rng.uniform(size=(3, 49, 64)))
    assert ly.bilinear_fuse(a, Tensor(np.zeros((3, 49, 64)))).data.max() == 0
    out = ly.bilinear_fuse(a, Tensor(rng.uniform(size=(3, 49, 64)))).data
    assert out.shape == (3, 4096)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1, rtol=1e-5)


def test_bilinear_shape_mismatch():
    with pytest.raises(ValueError):
        ly.bilinear_pool(Tensor(np.ones((2, 49, 3))), Tensor(np.ones((2, 48, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bilinear_fuse_invariant_to_spatial_permutation(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 49, 5))
    b = rng.normal(size=(2, 49, 4))
    perm = rng.permutation(49)
    x = ly.bilinear_fuse(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    y = ly.bilinear_fuse(Tensor(a[:, perm], dtype=np.float64), Tensor(b[:, perm], dtype=np.float64)).data
    np.testing.assert_allclose(x, y, atol=1e-12)


def test_bilinear_fuse_gradient():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 6, 4))
    fn = lambda x, y: tc.softmax_cross_entropy(ly.bilinear_fuse(x, y), [1, 7])
    assert finite_difference_check(fn, [a, b], epsilon=1e-6) < 1e-4


# --- compact bilinear ----------------------------------------------------------

def test_sketch_dimension_must_be_power_of_two():
    with pytest.raises(ValueError, match="power of two"):
        ly.make_sketch_hashes(4, 4, 1000, 0)
    assert ly.make_sketch_hashes(4, 4, 16384, 0).dim == 16384


def test_count_sketch_matches_definition():
    rng = np.random.default_rng(0)
    hs = ly.make_sketch_hashes(6, 6, 8, 3)
    x = rng.normal(size=6)
    expected = np.zeros(8)
    for c in range(6):
        expected[hs.h_rgb[c]] += hs.s_rgb[c] * x[c]
    np.testing.assert_allclose(ly.count_sketch(x, hs.h_rgb, hs.s_rgb, 8), expected)


def test_compact_zero_inputs_give_zero():
    hs = ly.make_sketch_hashes(4, 4, 32, 0)
    z = Tensor(np.zeros((2, 49, 4)))
    assert np.abs(ly.compact_bilinear_fuse(z, z, hs).data).max() == 0


def test_compact_pool_equals_explicit_sketch_of_outer_product():
    """Tensor sketch of a (x) b equals the count sketch of the outer product under hash h1+h2 mod d."""
    rng = np.random.default_rng(4)
    c, d = 5, 16
    hs = ly.make_sketch_hashes(c, c, d, 1)
    a, b = rng.normal(size=(1, 3, c)), rng.normal(size=(1, 3, c))
    expected = np.zeros(d)
    for s in range(3):
        for i in range(c):
            for j in range(c):
                expected[(hs.h_rgb[i] + hs.h_n[j]) % d] += hs.s_rgb[i] * hs.s_n[j] * a[0, s, i] * b[0, s, j]
    got = ly.compact_bilinear_pool(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), hs).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_compact_gradient():
    rng = np.random.default_rng(5)
    hs = ly.make_sketch_hashes(3, 4, 16, 2)
    a, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 4))
    fn = lambda x, y: tc.smooth_l1_loss(ly.compact_bilinear_pool(x, y, hs), np.zeros((2, 16)))
    assert finite_difference_check(fn, [a, b], epsilon=1e-6) < 1e-4
    # signed sqrt is not differentiable at 0; use a sketch with every bin occupied
    hs = ly.make_sketch_hashes(6, 6, 4, 0)
    a, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(2, 5, 6))
    pooled = ly.compact_bilinear_pool(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), hs).data
    assert np.abs(pooled).min() > 0.05
    fn2 = lambda x, y: tc.softmax_cross_entropy(ly.compact_bilinear_fuse(x, y, hs), [3, 1])
    assert finite_difference_check(fn2, [a, b], epsilon=1e-6) < 1e-4


def test_compact_estimator_is_unbiased():
    """Averaging the sketch inner product over independent hash seeds approaches the exact one."""
    rng = np.random.default_rng(6)
    c, d = 8, 32
    errs_single, errs_avg = [], []
    for _ in range(20):
        a, b, x, y = (rng.normal(size=(1, 4, c)) for _ in range(4))
        exact = np.sum(ly.bilinear_pool(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
                       * ly.bilinear_pool(Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64)).data)
        est = []
        for seed in range(64):
            hs = ly.make_sketch_hashes(c, c, d, seed)
            p = ly.compact_bilinear_pool(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), hs).data
            q = ly.compact_bilinear_pool(Tensor(x, dtype=np.float64), Tensor(y, dtype=np.float64), hs).data
            est.append(float(np.sum(p * q)))
        scale = abs(exact) + 1e-9
        errs_single.append(abs(est[0] - exact) / scale)
        errs_avg.append(abs(np.mean(est) - exact) / scale)
    assert np.median(errs_avg) < np.median(errs_single)
    assert np.median(errs_avg) < 0.5
