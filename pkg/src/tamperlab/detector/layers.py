"""RoI pooling and the two bilinear fusion paths, as differentiable ops."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ..tensor_core import Tensor, record_op, reshape, signed_sqrt_l2norm

ROI_SIZE = 7


@dataclass
class RoiFeaturePair:
    """RoI features of both streams for the same proposals, each R x 49 x C."""

    f_rgb: Tensor
    f_n: Tensor
    boxes: np.ndarray  # R x 4 source proposals


def roi_feature_window(box, stride: int, feature_hw: Tuple[int, int]) -> Tuple[int, int, int, int]:
    """Feature-map cells (x1, y1, x2, y2), x2/y2 exclusive, covered by an image-space box."""
    fh, fw = feature_hw
    x1 = int(np.clip(math.floor(box[0] / stride), 0, fw))
    y1 = int(np.clip(math.floor(box[1] / stride), 0, fh))
    x2 = int(np.clip(math.ceil(box[2] / stride), 0, fw))
    y2 = int(np.clip(math.ceil(box[3] / stride), 0, fh))
    return x1, y1, x2, y2


def roi_pool(features: Tensor, boxes: np.ndarray, stride: int, output: int = ROI_SIZE) -> Tensor:
    """Max-pool each box into an output x output grid; returns R x output**2 x C.

    Boxes are in input pixels. Each box is mapped onto the feature grid by
    dividing by ``stride`` and rounding outward, then split into integer bins
    (floor/ceil edges, so bins may overlap but never vanish unless the box
    misses the map). Empty bins give 0.
    """
    c, fh, fw = features.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    r = len(boxes)
    fd = features.data
    nb = output * output
    if r == 0:
        return record_op("roi_pool", np.zeros((0, nb, c), dtype=fd.dtype), (features,),
                         lambda g: (np.zeros_like(fd),))
    win = np.array([roi_feature_window(bx, stride, (fh, fw)) for bx in boxes], dtype=np.int64)
    x1, y1, x2, y2 = win.T
    empty = (x2 <= x1) | (y2 <= y1)
    i = np.arange(output)
    hgt = np.maximum(y2 - y1, 1)[:, None]
    wid = np.maximum(x2 - x1, 1)[:, None]
    ylo = y1[:, None] + (i * hgt) // output
    yhi = y1[:, None] - ((-(i + 1) * hgt) // output)
    xlo = x1[:, None] + (i * wid) // output
    xhi = x1[:, None] - ((-(i + 1) * wid) // output)
    mr = int((yhi - ylo).max())
    mc = int((xhi - xlo).max())
    # cells past a bin's end repeat the bin's first cell: the max and its
    # first-occurrence index are unchanged
    rows = ylo[:, :, None] + np.arange(mr)
    rows = np.where(rows < yhi[:, :, None], rows, ylo[:, :, None])  # R x out x mr
    cols = xlo[:, :, None] + np.arange(mc)
    cols = np.where(cols < xhi[:, :, None], cols, xlo[:, :, None])
    cell = rows[:, :, None, :, None] * fw + cols[:, None, :, None, :]  # R x by x bx x mr x mc
    cell = np.minimum(cell.reshape(r, nb, mr * mc), fh * fw - 1)
    hwc = np.ascontiguousarray(fd.reshape(c, fh * fw).T)
    out = hwc[cell[:, :, 0]]  # R x bins x C
    src = np.broadcast_to(cell[:, :, :1], out.shape).copy()
    for j in range(1, mr * mc):
        idx = cell[:, :, j]
        v = hwc[idx]
        better = v > out
        out = np.where(better, v, out)
        src = np.where(better, idx[:, :, None], src)
    out[empty] = 0
    src = np.where(empty[:, None, None], -1, src)
    out_t = np.ascontiguousarray(out)
    chan = np.arange(c)

    def backward(g):
        ok = src >= 0
        idx = (chan[None, None, :] * (fh * fw) + src)[ok]
        gflat = np.bincount(idx, weights=g[ok], minlength=c * fh * fw)
        return (gflat.reshape(c, fh, fw).astype(g.dtype),)

    return record_op("roi_pool", out_t, (features,), backward)


def bilinear_pool(f_rgb: Tensor, f_n: Tensor) -> Tensor:
    """Per RoI sum over spatial positions of outer products: f_rgb^T f_n (R x C1 x C2)."""
    if f_rgb.data.ndim != 3 or f_n.data.ndim != 3 or f_rgb.shape[:2] != f_n.shape[:2]:
        raise ValueError(f"bilinear_pool: incompatible shapes {f_rgb.shape} and {f_n.shape}")
    a, b = f_rgb.data, f_n.data
    out = np.matmul(a.transpose(0, 2, 1), b)

    def backward(g):
        return np.matmul(b, g.transpose(0, 2, 1)), np.matmul(a, g)

    return record_op("bilinear_pool", out, (f_rgb, f_n), backward)


def bilinear_fuse(f_rgb: Tensor, f_n: Tensor) -> Tensor:
    """Full bilinear fusion: flattened f_rgb^T f_n, signed sqrt, L2 normalised (R x C1*C2)."""
    x = bilinear_pool(f_rgb, f_n)
    r, c1, c2 = x.shape
    return signed_sqrt_l2norm(reshape(x, (r, c1 * c2)))


@dataclass(frozen=True)
class SketchHashes:
    """Count-sketch hash functions for both inputs of compact bilinear pooling."""

    h_rgb: np.ndarray
    s_rgb: np.ndarray
    h_n: np.ndarray
    s_n: np.ndarray
    dim: int


def make_sketch_hashes(c_rgb: int, c_n: int, dim: int, seed: int) -> SketchHashes:
    if dim <= 0 or dim & (dim - 1):
        raise ValueError(f"sketch dimension must be a power of two, got {dim}")
    rng = np.random.default_rng(seed)
    return SketchHashes(
        h_rgb=rng.integers(0, dim, size=c_rgb),
        s_rgb=rng.choice(np.array([-1.0, 1.0]), size=c_rgb),
        h_n=rng.integers(0, dim, size=c_n),
        s_n=rng.choice(np.array([-1.0, 1.0]), size=c_n),
        dim=dim,
    )


def count_sketch(x: np.ndarray, h: np.ndarray, s: np.ndarray, dim: int) -> np.ndarray:
    """Project the last axis of ``x`` to ``dim`` buckets: out[..., h[c]] += s[c] x[..., c]."""
    out = np.zeros(x.shape[:-1] + (dim,), dtype=np.float64)
    for c in range(x.shape[-1]):
        out[..., h[c]] += s[c] * x[..., c]
    return out


def compact_bilinear_pool(f_rgb: Tensor, f_n: Tensor, hashes: SketchHashes) -> Tensor:
    """Tensor-sketch estimate of sum-pooled bilinear features (R x d, before normalisation).

    Each position's two count sketches are circularly convolved (products of
    their real FFTs) and the results summed over positions.
    """
    if f_rgb.data.ndim != 3 or f_n.data.ndim != 3 or f_rgb.shape[:2] != f_n.shape[:2]:
        raise ValueError(f"compact_bilinear_pool: incompatible shapes {f_rgb.shape} and {f_n.shape}")
    d = hashes.dim
    a, b = f_rgb.data, f_n.data
    r = a.shape[0]
    out = np.zeros((r, d))
    spectra = []
    for k in range(r):
        fa = np.fft.rfft(count_sketch(a[k], hashes.h_rgb, hashes.s_rgb, d), axis=-1)
        fb = np.fft.rfft(count_sketch(b[k], hashes.h_n, hashes.s_n, d), axis=-1)
        out[k] = np.fft.irfft((fa * fb).sum(axis=0), n=d)
        spectra.append((fa, fb))

    def backward(g):
        ga = np.zeros(a.shape, dtype=np.float64)
        gb = np.zeros(b.shape, dtype=np.float64)
        for k in range(r):
            fa, fb = spectra[k]
            gk = np.fft.rfft(g[k].astype(np.float64))[None, :]
            gsa = np.fft.irfft(gk * np.conj(fb), n=d)
            gsb = np.fft.irfft(gk * np.conj(fa), n=d)
            ga[k] = gsa[:, hashes.h_rgb] * hashes.s_rgb
            gb[k] = gsb[:, hashes.h_n] * hashes.s_n
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return record_op("compact_bilinear_pool", out.astype(a.dtype), (f_rgb, f_n), backward)


def compact_bilinear_fuse(f_rgb: Tensor, f_n: Tensor, hashes: SketchHashes) -> Tensor:
    return signed_sqrt_l2norm(compact_bilinear_pool(f_rgb, f_n, hashes))
