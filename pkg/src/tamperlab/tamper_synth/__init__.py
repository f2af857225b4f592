"""Synthetic splice / copy-move / removal dataset generation."""

from .augment import attack, attack_sample, augment, jpeg_roundtrip, parse_spec, psnr, resize_image, resize_mask
from .corpus import ObjectInstance, SourceRecord, load_corpus, make_toy_corpus, rasterize_polygon
from .dataset import (
    ManifestError, generate_one, generate_samples, read_manifest, sample_rng, split_train_test, write_manifest,
)
from .ops import (
    AUTHENTIC, TECHNIQUES, TamperRetry, TamperSample, authentic_sample, inpaint_diffusion, make_copy_move,
    make_removal, make_splice, mask_boxes,
)
