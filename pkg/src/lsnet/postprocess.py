"""Segment lists to pixel-level confidence and binary maps.

Pipeline: Bresenham rasterization dilated to width ``W_l`` with per-pixel
max confidence, Gaussian smoothing, then Otsu or fixed-threshold
binarization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from lsnet import kernels
from lsnet.errors import ConfigError, ContractError
from lsnet.gridcodec import LineSegment, segments_to_array
from lsnet.synthdata import gaussian_blur

DEFAULT_SMOOTH_SIGMA = 1.0
DEFAULT_SMOOTH_KERNEL = 5
OTSU_BINS = 256


@dataclass
class SegmentationMap:
    values: np.ndarray
    kind: str  # "confidence" or "binary"


def bresenham_8(p0, p1) -> list:
    """8-connected pixel line from ``p0`` to ``p1`` inclusive, as (x, y) tuples."""
    pts = kernels.bresenham(int(p0[0]), int(p0[1]), int(p1[0]), int(p1[1]))
    return [tuple(int(v) for v in p) for p in pts]


def rasterize_segments(segments, wl: int, size) -> SegmentationMap:
    """Confidence map where each pixel holds the max confidence of the covering segments.

    Pixel ``j`` spans ``[j, j+1)``, so an endpoint maps to the pixel whose
    center is nearest (ties upward), i.e. ``floor(coordinate)``, clamped to
    the image. Each Bresenham pixel is dilated by a ``wl`` x ``wl`` square spanning
    offsets ``-(wl-1)//2 .. wl//2`` (the extra row/column for even ``wl`` lies
    right and below). Segments without a confidence count as 1.
    """
    wl = int(wl)
    if wl < 1:
        raise ConfigError(f"W_l must be an integer >= 1, got {wl}")
    width, height = (size, size) if np.isscalar(size) else size
    segs = list(segments)
    arr = segments_to_array(segs)
    confs = np.array(
        [1.0 if not isinstance(s, LineSegment) or s.confidence is None else s.confidence for s in segs],
        dtype=np.float64,
    )
    values = kernels.rasterize_max(arr, confs, int(width), int(height), wl)
    return SegmentationMap(values, "confidence")


def smooth_map(smap: SegmentationMap, sigma: float = DEFAULT_SMOOTH_SIGMA,
               kernel_size: int = DEFAULT_SMOOTH_KERNEL) -> SegmentationMap:
    """Gaussian smoothing of a confidence map; ``sigma=0`` is the identity."""
    if sigma == 0:
        return SegmentationMap(smap.values.copy(), "confidence")
    out = gaussian_blur(smap.values, sigma, kernel_size)
    return SegmentationMap(np.clip(out, 0.0, 1.0), "confidence")


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to 256 integer levels, rounding half-up."""
    return np.clip(np.floor(np.asarray(values) * (OTSU_BINS - 1) + 0.5), 0, OTSU_BINS - 1).astype(np.int64)


def otsu_level(levels: np.ndarray):
    """Otsu level ``k`` on a 256-level histogram, or None if only one level occurs.

    Class 0 is ``level <= k``; ``k`` maximizes the between-class variance
    ``w0 w1 (mu1 - mu0)^2``, ties going to the lowest ``k``.
    """
    hist = np.bincount(np.asarray(levels).ravel(), minlength=OTSU_BINS).astype(np.float64)
    total = hist.sum()
    if total == 0:
        raise ContractError("empty map")
    if np.count_nonzero(hist) == 1:
        return None
    idx = np.arange(OTSU_BINS, dtype=np.float64)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * idx)
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.full(OTSU_BINS, -1.0)
    mu0 = m0[valid] / w0[valid]
    mu1 = (m0[-1] - m0[valid]) / w1[valid]
    between[valid] = (w0[valid] / total) * (w1[valid] / total) * (mu1 - mu0) ** 2
    return int(np.argmax(between))


def otsu_binarize(smap: SegmentationMap):
    """Otsu binarization; returns ``(binary map, threshold)``.

    Output is 1 where the quantized level exceeds the Otsu level ``k``. The
    threshold is reported as the value boundary ``(k + 0.5) / 255``. A
    constant map yields an all-zero map and its own value as threshold.
    """
    values = np.asarray(smap.values, dtype=np.float64)
    levels = quantize(values)
    k = otsu_level(levels)
    if k is None:
        return SegmentationMap(np.zeros(values.shape, dtype=np.uint8), "binary"), float(values.flat[0])
    return SegmentationMap((levels > k).astype(np.uint8), "binary"), (k + 0.5) / (OTSU_BINS - 1)


def fixed_binarize(smap: SegmentationMap, t: float = 0.5) -> SegmentationMap:
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {t}")
    return SegmentationMap((np.asarray(smap.values) > t).astype(np.uint8), "binary")


def map_to_png(smap: SegmentationMap, path):
    """8-bit grayscale PNG with values scaled by 255 and rounded half-up."""
    scale = 255.0
    data = np.floor(np.clip(np.asarray(smap.values, dtype=np.float64), 0, 1) * scale + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def segments_to_binary(segments, wl, size, binarize="otsu", sigma=DEFAULT_SMOOTH_SIGMA,
                       kernel_size=DEFAULT_SMOOTH_KERNEL) -> SegmentationMap:
    """rasterize -> smooth -> binarize, with ``binarize`` either ``"otsu"`` or a float threshold."""
    conf = rasterize_segments(segments, wl, size)
    smoothed = smooth_map(conf, sigma, kernel_size)
    if binarize == "otsu":
        return otsu_binarize(smoothed)[0]
    return fixed_binarize(smoothed, float(binarize))
