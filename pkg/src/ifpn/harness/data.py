"""Synthetic multiscale blob task.

Each image holds Gaussian blobs of random scale. A blob of width ``sigma``
(base pixels) belongs to level ``l`` when ``2**l <= sigma < 2**(l+1)``; the
level-``l`` target is the max-combined heatmap of that level's blobs,
rendered at the level's resolution. Telling blobs apart by scale needs
context from neighbouring levels, which is what the pyramid fusion provides.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor_core import FeaturePyramid
from .config import SyntheticTaskSpec


@dataclass(frozen=True)
class Blob:
    cy: float
    cx: float
    sigma: float


def level_of(sigma: float, levels: int) -> int | None:
    """1-based level whose band [2^l, 2^(l+1)) contains ``sigma``, else None."""
    for l in range(1, levels + 1):
        if 2.0 ** l <= sigma < 2.0 ** (l + 1):
            return l
    return None


def render_image(blobs, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for b in blobs:
        img += np.exp(-((yy - b.cy) ** 2 + (xx - b.cx) ** 2) / (2 * b.sigma ** 2))
    return img


def render_targets(blobs, size: int, levels: int) -> FeaturePyramid:
    out = []
    for l in range(1, levels + 1):
        stride = 2 ** (l - 1)
        side = size // stride
        # level pixel centres expressed in base-pixel coordinates
        c = (np.arange(side) + 0.5) * stride - 0.5
        yy, xx = np.meshgrid(c, c, indexing="ij")
        t = np.zeros((side, side))
        for b in blobs:
            if level_of(b.sigma, levels) == l:
                t = np.maximum(t, np.exp(-((yy - b.cy) ** 2 + (xx - b.cx) ** 2) / (2 * b.sigma ** 2)))
        out.append(t[None, None])
    return FeaturePyramid(out)


def sample_blobs(spec: SyntheticTaskSpec, rng: np.random.Generator) -> list[Blob]:
    count = int(rng.integers(spec.blobs_min, spec.blobs_max + 1))
    blobs = []
    for _ in range(count):
        l = int(rng.integers(1, spec.levels + 1))
        sigma = float(rng.uniform(2.0 ** l, 2.0 ** (l + 1)))
        cy, cx = rng.uniform(0, spec.image_size - 1, size=2)
        blobs.append(Blob(float(cy), float(cx), sigma))
    return blobs


def make_sample(blobs, spec: SyntheticTaskSpec, rng: np.random.Generator):
    img = render_image(blobs, spec.image_size)
    if spec.noise > 0:
        img = img + spec.noise * rng.standard_normal(img.shape)
    return img[None], render_targets(blobs, spec.image_size, spec.levels)


def make_dataset(spec: SyntheticTaskSpec, seed: int, count: int | None = None):
    """List of (image (1, H, W), target pyramid with one channel per level)."""
    rng = np.random.default_rng([seed, 17])
    n = spec.samples if count is None else count
    return [make_sample(sample_blobs(spec, rng), spec, rng) for _ in range(n)]


def make_splits(spec: SyntheticTaskSpec, seed: int):
    """(train, held-out) drawn from one stream so they never overlap."""
    data = make_dataset(spec, seed, spec.samples + spec.heldout)
    return data[:spec.samples], data[spec.samples:]


def collate(samples) -> tuple[np.ndarray, FeaturePyramid]:
    images = np.stack([s[0] for s in samples])
    levels = len(samples[0][1])
    targets = FeaturePyramid([np.concatenate([s[1][l] for s in samples]) for l in range(levels)])
    return images, targets
