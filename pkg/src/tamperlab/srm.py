"""Fixed SRM residual filter layer producing a 3-channel local-noise map."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image

from .tensor_core import Tensor, conv2d

TRUNCATION = 3.0
CACHE_ENV = "TAMPERLAB_CACHE"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SrmKernelBank:
    """Three 5x5 residual patterns (integer numerators over a scalar), each wired to all three input channels."""

    numerators: np.ndarray  # 3 x 5 x 5 integers
    denominators: Tuple[float, ...]
    truncation: float = TRUNCATION

    @property
    def patterns(self) -> np.ndarray:
        return _frozen(self.numerators / np.asarray(self.denominators, dtype=np.float64)[:, None, None])

    @property
    def weights(self) -> np.ndarray:
        """Conv kernels C_out x C_in x 5 x 5 (each pattern / 3 on every input channel)."""
        w = np.repeat(self.patterns[:, None, :, :] / 3.0, 3, axis=1)
        return _frozen(w.astype(np.float32))


def srm_kernel_bank(truncation: float = TRUNCATION) -> SrmKernelBank:
    square3 = np.zeros((5, 5))
    square3[1:4, 1:4] = [[-1, 2, -1], [2, -4, 2], [-1, 2, -1]]
    square5 = np.array([[-1, 2, -2, 2, -1],
                        [2, -6, 8, -6, 2],
                        [-2, 8, -12, 8, -2],
                        [2, -6, 8, -6, 2],
                        [-1, 2, -2, 2, -1]], dtype=np.float64)
    horiz = np.zeros((5, 5))
    horiz[2, 1:4] = [1, -2, 1]
    return SrmKernelBank(_frozen(np.stack([square3, square5, horiz])), (4.0, 12.0, 2.0), truncation)


_BANK = srm_kernel_bank()
_ZERO_BIAS = Tensor(np.zeros(3), dtype=np.float64)


def apply_srm(image: np.ndarray, bank: SrmKernelBank = _BANK, truncate: bool = True) -> np.ndarray:
    """Noise residuals of an H x W x 3 image with raw 0-255 pixel values.

    Returns a float32 array of shape 3 x H x W clamped to [-T, T]. Every
    input channel carries the same weight, so the channel sum is filtered
    with the integer numerators in float64 and scaled once at the end;
    integer images therefore give exact zeros on flat regions.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"apply_srm expects H x W x 3, got {image.shape}")
    h, w, _ = image.shape
    if h < 5 or w < 5:
        raise ValueError(f"apply_srm needs at least 5x5 pixels, got {h}x{w}")
    total = image.astype(np.float64).sum(axis=2)[None]
    kernels = Tensor(np.asarray(bank.numerators, dtype=np.float64)[:, None], dtype=np.float64)
    out = conv2d(Tensor(total, dtype=np.float64), kernels, _ZERO_BIAS, stride=1, pad=2).data
    out = out / (3.0 * np.asarray(bank.denominators, dtype=np.float64))[:, None, None]
    if truncate:
        out = np.clip(out, -bank.truncation, bank.truncation)
    return out.astype(np.float32)


def cached_apply_srm(image: np.ndarray) -> np.ndarray:
    """:func:`apply_srm` backed by an on-disk cache when TAMPERLAB_CACHE is set."""
    root = os.environ.get(CACHE_ENV)
    if not root:
        return apply_srm(image)
    image = np.ascontiguousarray(image, dtype=np.uint8)
    key = hashlib.sha256(repr(image.shape).encode() + image.tobytes()).hexdigest()
    path = Path(root) / f"srm_{key}.npy"
    if path.exists():
        return np.load(path)
    out = apply_srm(image)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".{os.getpid()}.tmp.npy")
    np.save(tmp, out)
    os.replace(tmp, path)
    return out


def noise_map_to_png(noise: np.ndarray, path, truncation: float = TRUNCATION) -> None:
    """Map [-T, T] linearly onto [0, 255] and save as an RGB PNG."""
    scaled = (np.clip(noise, -truncation, truncation) + truncation) * (255.0 / (2 * truncation))
    rgb = np.round(np.transpose(scaled, (1, 2, 0))).astype(np.uint8)
    Image.fromarray(rgb).save(path)
