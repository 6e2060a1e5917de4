"""Random image transformations for contrastive views.

The default pipeline applies, in order: random resized crop (area scale
(0.2, 1), aspect ratio (3/4, 4/3), bilinear resize back to the native size),
horizontal flip with p = 0.5, colour jitter (brightness 0.4, contrast 0.4,
saturation 0.4, hue 0.1) with p = 0.8, and grayscale with p = 0.2.
Single-channel images skip the jitter and grayscale stages.

Colour jitter math (our formulas; factors drawn uniformly):
    brightness  x * b,                        b in [1-0.4, 1+0.4]
    contrast    (x - mean(gray(x))) * c + mean(gray(x)),  c in [0.6, 1.4]
    saturation  (x - gray(x)) * s + gray(x),   s in [0.6, 1.4]
    hue         rotate the chroma plane of YIQ by 2*pi*h,  h in [-0.1, 0.1]
The four adjustments run in a random order and every stage clamps to [0, 1].

Images are float arrays shaped (H, W, C) with values in [0, 1].  Randomness
comes from ``np.random.default_rng([seed, index])`` so a sample's views are
fixed by (seed, index) alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["AugmentPipeline", "augment", "augment_batch", "hflip", "resized_crop", "rng_for",
           "VectorJitter"]

_GRAY = np.array([0.299, 0.587, 0.114])
_TO_YIQ = np.array([[0.299, 0.587, 0.114],
                    [0.596, -0.274, -0.322],
                    [0.211, -0.523, 0.312]])
_FROM_YIQ = np.linalg.inv(_TO_YIQ)


@dataclass(frozen=True)
class AugmentPipeline:
    crop: bool = True
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2

    @classmethod
    def identity(cls) -> "AugmentPipeline":
        return cls(crop=False, flip_p=0.0, jitter_p=0.0, grayscale_p=0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPipeline":
        d = dict(d)
        for key in ("crop_scale", "crop_ratio"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def _bilinear_axis(n_out: int, n_in: int, start: float, length: float):
    # half-pixel centres, sampling the crop window [start, start + length)
    pos = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resized_crop(img: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    """Crop ``img[top:top+h, left:left+w]`` and resize bilinearly to the input size."""
    H, W = img.shape[:2]
    crop = img[top:top + h, left:left + w]
    r0, r1, rf = _bilinear_axis(H, h, 0.0, h)
    c0, c1, cf = _bilinear_axis(W, w, 0.0, w)
    rows = crop[r0] * (1 - rf)[:, None, None] + crop[r1] * rf[:, None, None]
    out = rows[:, c0] * (1 - cf)[None, :, None] + rows[:, c1] * cf[None, :, None]
    return out


def _crop_box(rng, H: int, W: int, scale, ratio):
    area = H * W
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    # fallback: the largest centred box with an admissible aspect ratio
    in_ratio = W / H
    if in_ratio < ratio[0]:
        w, h = W, int(round(W / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = H, int(round(H * ratio[1]))
    else:
        w, h = W, H
    return (H - h) // 2, (W - w) // 2, h, w


def _gray(img):
    return img @ _GRAY


def _jitter(img, rng, p: AugmentPipeline):
    ops = []
    if p.brightness:
        b = rng.uniform(max(0.0, 1 - p.brightness), 1 + p.brightness)
        ops.append(lambda x: x * b)
    if p.contrast:
        c = rng.uniform(max(0.0, 1 - p.contrast), 1 + p.contrast)
        ops.append(lambda x: (x - _gray(x).mean()) * c + _gray(x).mean())
    if p.saturation:
        s = rng.uniform(max(0.0, 1 - p.saturation), 1 + p.saturation)
        ops.append(lambda x: (x - _gray(x)[..., None]) * s + _gray(x)[..., None])
    if p.hue:
        h = rng.uniform(-p.hue, p.hue)
        cos, sin = math.cos(2 * math.pi * h), math.sin(2 * math.pi * h)
        rot = np.array([[1, 0, 0], [0, cos, -sin], [0, sin, cos]])
        mat = _FROM_YIQ @ rot @ _TO_YIQ
        ops.append(lambda x: x @ mat.T)
    for i in rng.permutation(len(ops)):
        img = np.clip(ops[i](img), 0.0, 1.0)
    return img


def augment(img: np.ndarray, pipeline: AugmentPipeline, seed: int, index: int = 0) -> np.ndarray:
    """One random view of ``img`` (H, W, C), deterministic in ``(seed, index)``."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"augment expects (H, W, C) with C in {{1, 3}}, got {img.shape}")
    rng = rng_for(seed, index)
    dtype = img.dtype
    out = img.astype(np.float64)
    H, W = out.shape[:2]
    if pipeline.crop:
        top, left, h, w = _crop_box(rng, H, W, pipeline.crop_scale, pipeline.crop_ratio)
        out = resized_crop(out, top, left, h, w)
    if pipeline.flip_p and rng.random() < pipeline.flip_p:
        out = hflip(out)
    if out.shape[2] == 3:
        if pipeline.jitter_p and rng.random() < pipeline.jitter_p:
            out = _jitter(out, rng, pipeline)
        if pipeline.grayscale_p and rng.random() < pipeline.grayscale_p:
            out = np.repeat(_gray(out)[..., None], 3, axis=2)
    return np.clip(out, 0.0, 1.0).astype(dtype, copy=False)


def augment_batch(x: np.ndarray, pipeline: AugmentPipeline, seed: int, indices) -> np.ndarray:
    return np.stack([augment(img, pipeline, seed, int(i)) for img, i in zip(x, indices)])


@dataclass(frozen=True)
class VectorJitter:
    """Gaussian jitter views for non-image (vector) data."""

    sigma: float = 0.1

    def __call__(self, x: np.ndarray, seed: int, index: int) -> np.ndarray:
        rng = rng_for(seed, index)
        return (x + self.sigma * rng.normal(size=x.shape)).astype(x.dtype)
