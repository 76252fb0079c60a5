"""Procedural cable scenes with their augmentations, plus the JSON-lines manifest format.

Geometry convention: an image of side ``S`` covers ``[0, S] x [0, S]``; pixel
``(row i, col j)`` spans ``[j, j+1) x [i, i+1)`` with its center at
``(j + 0.5, i + 0.5)``. Segment coordinates are in this continuous frame.

Cables are quadratic curves discretized into straight polyline pieces and
drawn with anti-aliased strokes over a background photograph or texture.
Every geometric augmentation transforms the ground-truth segments with the
same map as the image.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from lsnet import kernels
from lsnet.errors import ConfigError

BUNDLED_BACKGROUNDS = Path(__file__).parent / "data" / "backgrounds"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
LUMA = np.array([0.299, 0.587, 0.114])


def _check_range(name, rng_pair, lo=-math.inf, hi=math.inf):
    a, b = rng_pair
    if not (a <= b):
        raise ConfigError(f"{name} range {rng_pair} is empty")
    if a < lo or b > hi:
        raise ConfigError(f"{name} range {rng_pair} outside [{lo}, {hi}]")


@dataclass
class SceneParams:
    n_cables: tuple = (1, 4)
    sag: float = 16.0
    polyline_steps: int = 6
    cable_width: tuple = (1.5, 3.0)
    cable_intensity: tuple = (0.05, 0.95)
    min_contrast: float = 0.3
    spacing: tuple = (12.0, 48.0)
    angle: tuple = (0.0, math.pi)
    background_source: Optional[str] = None

    def __post_init__(self):
        self.n_cables = tuple(int(v) for v in self.n_cables)
        _check_range("n_cables", self.n_cables, lo=1)
        _check_range("cable_width", self.cable_width, lo=0.5)
        _check_range("cable_intensity", self.cable_intensity, lo=0.0, hi=1.0)
        _check_range("spacing", self.spacing, lo=0.0)
        _check_range("angle", self.angle)
        if self.polyline_steps < 1:
            raise ConfigError(f"polyline_steps must be >= 1, got {self.polyline_steps}")
        if self.sag < 0:
            raise ConfigError(f"sag must be >= 0, got {self.sag}")

    def to_dict(self):
        return asdict(self)


@dataclass
class AugmentConfig:
    p_apply: float = 0.25
    noise_mu: float = 0.0
    noise_sigma: tuple = (0.02, 0.08)
    blur_sigma: tuple = (0.5, 2.0)
    blur_kernel: int = 7
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.7, 1.3)
    hue: tuple = (-0.05, 0.05)
    grayscale_p: float = 0.1
    elastic_alpha: tuple = (1.0, 6.0)
    elastic_sigma: tuple = (6.0, 10.0)
    zoom: tuple = (0.6, 1.0)
    rotation: tuple = (-math.pi / 12, math.pi / 12)
    flip_h_p: float = 0.5
    flip_v_p: float = 0.5

    def __post_init__(self):
        for name in ("p_apply", "grayscale_p", "flip_h_p", "flip_v_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        _check_range("noise_sigma", self.noise_sigma, lo=0.0)
        _check_range("blur_sigma", self.blur_sigma, lo=0.0)
        _check_range("elastic_alpha", self.elastic_alpha, lo=0.0)
        _check_range("elastic_sigma", self.elastic_sigma, lo=0.0)
        _check_range("zoom", self.zoom, lo=1e-6, hi=1.0)
        _check_range("brightness", self.brightness, lo=0.0)
        _check_range("contrast", self.contrast, lo=0.0)
        _check_range("saturation", self.saturation, lo=0.0)
        _check_range("hue", self.hue, lo=-0.5, hi=0.5)
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError(f"blur_kernel must be odd, got {self.blur_kernel}")

    def to_dict(self):
        return asdict(self)


@dataclass
class SampleRecord:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    segments: np.ndarray  # N x 4 float
    seed: int = 0
    provenance: str = ""
    cable_ids: Optional[np.ndarray] = None  # cable index per segment
    alpha: Optional[np.ndarray] = None  # H x W stroke coverage
    foreground: Optional[np.ndarray] = None  # H x W x 3 premultiplied cable color
    widths: Optional[np.ndarray] = None  # stroke width per segment

    @property
    def size(self) -> int:
        return self.image.shape[0]


# ----------------------------------------------------------------------------
# geometry helpers


def clip_segments_to_image(segs: np.ndarray, size: float, extra: Optional[list] = None):
    """Clip (N, 4) segments to ``[0, size]^2``, dropping empty pieces.

    ``extra`` is a list of per-segment arrays filtered alongside.
    """
    out = []
    keep = []
    for k, (x1, y1, x2, y2) in enumerate(np.asarray(segs, dtype=np.float64).reshape(-1, 4)):
        res = kernels.clip_segment(x1, y1, x2, y2, 0.0, 0.0, float(size), float(size))
        if res is None:
            continue
        t0, t1 = res
        dx, dy = x2 - x1, y2 - y1
        piece = np.clip([x1 + t0 * dx, y1 + t0 * dy, x1 + t1 * dx, y1 + t1 * dy], 0.0, size)
        if math.hypot(piece[2] - piece[0], piece[3] - piece[1]) <= 1e-9:
            continue
        out.append(piece)
        keep.append(k)
    arr = np.array(out, dtype=np.float64).reshape(-1, 4)
    if extra is None:
        return arr
    return arr, [None if e is None else np.asarray(e)[keep] for e in extra]


def _pixel_centers(size):
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c)  # xs, ys


def stroke_coverage(segs: np.ndarray, widths, size: int) -> np.ndarray:
    """Anti-aliased coverage ``clip(w/2 + 0.5 - dist, 0, 1)`` of the union of strokes."""
    alpha = np.zeros((size, size), dtype=np.float64)
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 4)
    widths = np.broadcast_to(np.asarray(widths, dtype=np.float64), (segs.shape[0],))
    for (x1, y1, x2, y2), w in zip(segs, widths):
        reach = w / 2 + 1.0
        c0 = max(int(math.floor(min(x1, x2) - reach)), 0)
        c1 = min(int(math.ceil(max(x1, x2) + reach)), size)
        r0 = max(int(math.floor(min(y1, y2) - reach)), 0)
        r1 = min(int(math.ceil(max(y1, y2) + reach)), size)
        if c0 >= c1 or r0 >= r1:
            continue
        xs = np.arange(c0, c1) + 0.5
        ys = np.arange(r0, r1) + 0.5
        px, py = np.meshgrid(xs, ys)
        dx, dy = x2 - x1, y2 - y1
        ll = dx * dx + dy * dy
        if ll == 0:
            t = np.zeros_like(px)
        else:
            t = np.clip(((px - x1) * dx + (py - y1) * dy) / ll, 0.0, 1.0)
        dist = np.hypot(px - (x1 + t * dx), py - (y1 + t * dy))
        cov = np.clip(w / 2 + 0.5 - dist, 0.0, 1.0)
        np.maximum(alpha[r0:r1, c0:c1], cov, out=alpha[r0:r1, c0:c1])
    return alpha


# ----------------------------------------------------------------------------
# backgrounds


def procedural_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth multi-scale color texture with an optional horizon, values in [0, 1]."""
    img = np.zeros((size, size, 3))
    base = rng.uniform(0.15, 0.85, 3)
    img += base
    for scale, amp in ((size / 4, 0.25), (size / 16, 0.12), (size / 64, 0.05)):
        noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), max(scale, 0.5), mode="wrap")
        noise /= np.abs(noise).max() + 1e-12
        tint = rng.uniform(0.6, 1.0, 3)
        img += amp * noise[..., None] * tint
    if rng.random() < 0.5:
        ys = np.arange(size)[:, None]
        horizon = rng.uniform(0.3, 0.8) * size + 8 * np.sin(np.arange(size) / rng.uniform(10, 40))[None, :]
        below = (ys > horizon)[..., None]
        img = np.where(below, img * rng.uniform(0.4, 0.8) + rng.uniform(-0.1, 0.1, 3), img)
        img = ndimage.gaussian_filter(img, (1.0, 1.0, 0))
    return np.clip(img, 0.0, 1.0)


def list_backgrounds(source=None) -> list:
    folder = Path(source) if source else BUNDLED_BACKGROUNDS
    if not folder.is_dir():
        raise ConfigError(f"background source {folder} is not a directory")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise ConfigError(f"background source {folder} contains no images")
    return files


_BG_CACHE: dict = {}


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _background_array(path) -> np.ndarray:
    key = str(path)
    if key not in _BG_CACHE:
        _BG_CACHE[key] = load_image(path)
    return _BG_CACHE[key]


def sample_background(files, rng: np.random.Generator, size: int) -> np.ndarray:
    """Random square crop of a random background, resized to ``size``."""
    src = _background_array(files[int(rng.integers(len(files)))])
    h, w = src.shape[:2]
    side = int(rng.integers(max(min(h, w) // 2, 1), min(h, w) + 1))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    crop = (src[y0:y0 + side, x0:x0 + side] * 255).round().astype(np.uint8)
    resized = Image.fromarray(crop).resize((size, size), Image.BILINEAR)
    out = np.asarray(resized, dtype=np.float64) / 255.0
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# ----------------------------------------------------------------------------
# rendering


def _cable_polyline(p0, ctrl, p2, steps):
    t = np.linspace(0.0, 1.0, steps + 1)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t ** 2 * p2
    return np.hstack([pts[:-1], pts[1:]])


def render_scene(params: SceneParams, size: int, rng_seed: int) -> SampleRecord:
    """Draw a bundle of roughly parallel sagging cables over a background.

    Ground truth is the list of straight polyline pieces, cable by cable.
    """
    files = list_backgrounds(params.background_source)
    rng = np.random.default_rng(int(rng_seed))
    bg = sample_background(files, rng, size)

    n = int(rng.integers(params.n_cables[0], params.n_cables[1] + 1))
    theta = rng.uniform(*params.angle)
    spacing = rng.uniform(*params.spacing)
    u = np.array([math.cos(theta), math.sin(theta)])
    normal = np.array([-u[1], u[0]])
    center = np.array([size / 2, size / 2]) + rng.uniform(-0.3, 0.3, 2) * size
    half = size * 1.2
    sag_dir = 1.0 if normal[1] >= 0 else -1.0  # cables hang downward

    segs, ids, widths = [], [], []
    color_lo, color_hi = params.cable_intensity
    bg_mean = float(bg.mean())
    for i in range(n):
        offset = (i - (n - 1) / 2) * spacing + rng.normal(0.0, 0.1 * spacing)
        c = center + offset * normal
        p0, p2 = c - half * u, c + half * u
        sag = rng.uniform(0.0, params.sag)
        ctrl = c + sag_dir * 2.0 * sag * normal  # mid-curve deflection equals sag
        pieces = _cable_polyline(p0, ctrl, p2, params.polyline_steps)
        pieces = clip_segments_to_image(pieces, size)
        if len(pieces) == 0:
            continue
        w = rng.uniform(*params.cable_width)
        segs.append(pieces)
        ids.append(np.full(len(pieces), i))
        widths.append(np.full(len(pieces), w))
    segs = np.vstack(segs) if segs else np.zeros((0, 4))
    ids = np.concatenate(ids) if ids else np.zeros(0, dtype=int)
    widths = np.concatenate(widths) if widths else np.zeros(0)

    level = rng.uniform(color_lo, color_hi)
    if abs(level - bg_mean) < params.min_contrast:
        level = bg_mean - params.min_contrast if bg_mean > 0.5 else bg_mean + params.min_contrast
    level = float(np.clip(level, 0.0, 1.0))
    color = np.clip(level + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)

    alpha = stroke_coverage(segs, widths, size)
    fg = alpha[..., None] * color
    image = np.clip(bg * (1.0 - alpha[..., None]) + fg, 0.0, 1.0)
    return SampleRecord(
        image=image,
        segments=segs,
        seed=int(rng_seed),
        provenance="render_scene",
        cable_ids=ids.astype(np.int64),
        alpha=alpha,
        foreground=fg,
        widths=widths,
    )


# ----------------------------------------------------------------------------
# photometric augmentations


def add_gaussian_noise(image, mu: float, sigma: float, rng: np.random.Generator):
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    noise = rng.normal(mu, sigma, image.shape) if sigma > 0 else np.full(image.shape, float(mu))
    return np.clip(image + noise, 0.0, 1.0)


def gaussian_kernel1d(sigma: float, kernel_size: int) -> np.ndarray:
    """Sampled, sum-normalized 1-D Gaussian; its outer product is the 2-D kernel."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be a positive odd number, got {kernel_size}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    r = kernel_size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image, sigma: float, kernel_size: int):
    """Separable Gaussian blur over the two spatial axes with reflected edges."""
    k = gaussian_kernel1d(sigma, kernel_size)
    out = ndimage.correlate1d(np.asarray(image, dtype=np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def grayscale_rgb(image):
    luma = np.asarray(image, dtype=np.float64) @ LUMA
    return np.repeat(luma[..., None], 3, axis=-1)


def adjust_brightness(image, factor):
    return np.clip(image * factor, 0.0, 1.0)


def adjust_contrast(image, factor):
    mean = float((image @ LUMA).mean())
    return np.clip((image - mean) * factor + mean, 0.0, 1.0)


def adjust_saturation(image, factor):
    gray = (image @ LUMA)[..., None]
    return np.clip(gray + (image - gray) * factor, 0.0, 1.0)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def adjust_hue(image, shift):
    """Rotate chroma by ``shift`` turns in YIQ space."""
    a = 2.0 * math.pi * shift
    rot = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    m = _YIQ2RGB @ rot @ _RGB2YIQ
    return np.clip(image @ m.T, 0.0, 1.0)


def color_jitter(image, ranges: dict, rng: np.random.Generator):
    """Brightness, contrast, saturation, hue, in that order.

    ``ranges`` maps each op name to a ``(lo, hi)`` factor range (hue: shift
    in turns). Missing ops are skipped.
    """
    out = np.asarray(image, dtype=np.float64)
    ops = (
        ("brightness", adjust_brightness, 1.0),
        ("contrast", adjust_contrast, 1.0),
        ("saturation", adjust_saturation, 1.0),
        ("hue", adjust_hue, 0.0),
    )
    for name, fn, identity in ops:
        if name not in ranges:
            continue
        lo, hi = ranges[name]
        factor = rng.uniform(lo, hi) if hi > lo else lo
        if factor != identity:
            out = fn(out, factor)
    return out


# ----------------------------------------------------------------------------
# geometric augmentations


def _sample_field(field, x, y):
    # bilinear lookup of an (H, W) field at continuous coordinates
    return ndimage.map_coordinates(field, [np.atleast_1d(y) - 0.5, np.atleast_1d(x) - 0.5],
                                   order=1, mode="nearest")


def elastic_field(shape, alpha_e: float, sigma_e: float, rng: np.random.Generator):
    """Smoothed uniform(-1, 1) displacement fields scaled to peak magnitude ``alpha_e`` pixels."""
    h, w = shape
    fields = []
    for _ in range(2):
        f = rng.uniform(-1.0, 1.0, (h, w))
        if sigma_e > 0:
            f = ndimage.gaussian_filter(f, sigma_e, mode="reflect")
        peak = np.abs(f).max()
        fields.append(alpha_e * f / peak if peak > 0 else f * 0.0)
    return fields[0], fields[1]


def _warp_image(image, src_x, src_y, mode="reflect", cval=0.0):
    # resample so that output pixel center q takes input at continuous (src_x, src_y)
    coords = [src_y - 0.5, src_x - 0.5]
    # trigonometric round-off must not push exact pixel centers off the edge
    coords = [np.where(np.abs(c - np.round(c)) < 1e-9, np.round(c), c) for c in coords]
    fill = np.broadcast_to(np.asarray(cval, dtype=np.float64), (image.shape[-1],))
    chans = [
        ndimage.map_coordinates(image[..., c], coords, order=1, mode=mode, cval=float(fill[c]))
        for c in range(image.shape[-1])
    ]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def _subdivide(segs, max_len):
    out, src = [], []
    for k, (x1, y1, x2, y2) in enumerate(segs):
        n = max(1, int(math.ceil(math.hypot(x2 - x1, y2 - y1) / max_len)))
        t = np.linspace(0.0, 1.0, n + 1)
        xs = x1 + t * (x2 - x1)
        ys = y1 + t * (y2 - y1)
        for i in range(n):
            out.append((xs[i], ys[i], xs[i + 1], ys[i + 1]))
            src.append(k)
    return np.array(out, dtype=np.float64).reshape(-1, 4), np.array(src, dtype=np.int64)


def _point_line_dist(pts, a, b):
    d = b - a
    ll = float(d @ d)
    if ll == 0:
        return np.hypot(*(pts - a).T)
    return np.abs((pts[:, 0] - a[0]) * d[1] - (pts[:, 1] - a[1]) * d[0]) / math.sqrt(ll)


def _simplify_chain(points, tol):
    """Douglas-Peucker on an (M, 2) vertex chain; returns kept vertex indices."""
    keep = {0, len(points) - 1}
    stack = [(0, len(points) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        d = _point_line_dist(points[i + 1:j], points[i], points[j])
        m = int(np.argmax(d))
        if d[m] > tol:
            k = i + 1 + m
            keep.add(k)
            stack += [(i, k), (k, j)]
    return sorted(keep)


def simplify_polylines(segs, extra=None, tol: float = 0.5):
    """Merge consecutive connected, nearly collinear pieces.

    Pieces ``k`` and ``k+1`` form a chain when the end of ``k`` equals the
    start of ``k+1`` and their ``extra`` attributes (e.g. cable id) agree.
    """
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 4)
    if len(segs) == 0:
        return (segs, extra) if extra is not None else segs
    chains = [[0]]
    for k in range(1, len(segs)):
        connected = np.allclose(segs[k - 1, 2:], segs[k, :2], atol=1e-9)
        same = extra is None or all(e is None or e[k] == e[k - 1] for e in extra)
        if connected and same:
            chains[-1].append(k)
        else:
            chains.append([k])
    out, keep_idx = [], []
    for chain in chains:
        # vertex i is the start of piece chain[i]; the last vertex ends the chain
        pts = np.vstack([segs[chain[0], :2]] + [segs[k, 2:] for k in chain])
        kept = _simplify_chain(pts, tol)
        for a, b in zip(kept[:-1], kept[1:]):
            out.append(np.concatenate([pts[a], pts[b]]))
            keep_idx.append(chain[a])
    arr = np.array(out, dtype=np.float64).reshape(-1, 4)
    if extra is None:
        return arr
    return arr, [None if e is None else np.asarray(e)[keep_idx] for e in extra]


def elastic_transform(image, segments, alpha_e: float, sigma_e: float, rng: np.random.Generator,
                      field=None, max_piece: float = 4.0, simplify_tol: float = 0.25, extra=None,
                      inverse_iters: int = 3):
    """Elastic deformation of an image and its segments.

    The image is resampled by backward mapping ``out(q) = in(q + D(q))``.
    Segments are subdivided into pieces of at most ``max_piece`` pixels, their
    vertices moved by the inverse map: the first-order guess ``p - D(p)``
    refined by ``inverse_iters - 1`` fixed-point steps ``q <- p - D(q)``, clipped to
    the image, and re-merged where the result stays within ``simplify_tol``
    of a straight line. ``field`` may supply explicit ``(dx, dy)`` arrays.
    Returns ``(image, segments)`` or, with ``extra``, ``(image, segments,
    extra)`` where extra per-segment arrays follow the pieces.
    """
    if alpha_e < 0 or sigma_e < 0:
        raise ConfigError("elastic alpha and sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 4)
    h, w = image.shape[:2]
    if field is None:
        if alpha_e == 0:
            return (image.copy(), segs.copy()) if extra is None else (image.copy(), segs.copy(), extra)
        field = elastic_field((h, w), alpha_e, sigma_e, rng)
    dx, dy = (np.broadcast_to(np.asarray(f, dtype=np.float64), (h, w)) for f in field)
    xs, ys = _pixel_centers(w)
    out = _warp_image(image, xs + dx, ys + dy) if image.ndim == 3 else \
        _warp_image(image[..., None], xs + dx, ys + dy)[..., 0]

    pieces, src = _subdivide(segs, max_piece) if len(segs) else (segs, np.zeros(0, dtype=np.int64))
    if len(pieces):
        for a in (0, 2):
            px, py = pieces[:, a].copy(), pieces[:, a + 1].copy()
            qx, qy = px, py
            for _ in range(inverse_iters):
                qx, qy = px - _sample_field(dx, qx, qy), py - _sample_field(dy, qx, qy)
            pieces[:, a], pieces[:, a + 1] = qx, qy
    ex = [None if e is None else np.asarray(e)[src] for e in (extra or [])]
    ex.append(src)
    pieces, ex = clip_segments_to_image(pieces, w, extra=ex)
    pieces, ex = simplify_polylines(pieces, extra=ex, tol=simplify_tol)
    if extra is None:
        return out, pieces
    return out, pieces, ex[:-1]


def _affine_points(segs, mat, offset):
    pts = segs.reshape(-1, 2) @ mat.T + offset
    return pts.reshape(-1, 4)


def zoom_rotate_flip(image, segments, crop_fraction: float = 1.0, theta: float = 0.0,
                     flip_h: bool = False, flip_v: bool = False, rng: Optional[np.random.Generator] = None,
                     crop_origin=None, extra=None, fill=None):
    """Rotate about the center and crop back to full size; flips come last.

    Rotation uses ``R(theta)`` in the y-up frame, i.e. a counterclockwise turn
    on screen: with ``theta = 90deg`` a point ``(x, y)`` goes to ``(y, S - x)``.
    The crop of side ``crop_fraction * S`` sits at ``crop_origin`` (random
    when None) and is scaled back to ``S``. Uncovered corners take ``fill``
    (per-channel image mean by default).
    """
    if not 0.0 < crop_fraction <= 1.0:
        raise ConfigError(f"crop_fraction must lie in (0, 1], got {crop_fraction}")
    image = np.asarray(image, dtype=np.float64)
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 4)
    s = image.shape[0]
    c = s / 2.0
    cos, sin = math.cos(theta), math.sin(theta)
    rot = np.array([[cos, sin], [-sin, cos]])
    side = crop_fraction * s
    if crop_origin is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        crop_origin = rng.uniform(0.0, s - side, 2) if side < s else np.zeros(2)
    ox, oy = crop_origin
    scale = s / side
    # forward map: p -> scale * (R (p - c) + c - o), then flips
    mat = scale * rot
    off = scale * (c - rot @ np.array([c, c]) - np.array([ox, oy]))
    if flip_h:
        mat = np.array([[-1, 0], [0, 1]]) @ mat
        off = np.array([s - off[0], off[1]])
    if flip_v:
        mat = np.array([[1, 0], [0, -1]]) @ mat
        off = np.array([off[0], s - off[1]])

    identity = np.allclose(mat, np.eye(2)) and np.allclose(off, 0.0)
    if identity:
        out = image.copy()
    else:
        inv = np.linalg.inv(mat)
        xs, ys = _pixel_centers(s)
        q = np.stack([xs.ravel() - off[0], ys.ravel() - off[1]])
        src = inv @ q
        if fill is None:
            fill = image.reshape(-1, image.shape[-1]).mean(0) if image.ndim == 3 else image.mean()
        img3 = image if image.ndim == 3 else image[..., None]
        out = _warp_image(img3, src[0].reshape(s, s), src[1].reshape(s, s), mode="constant", cval=fill)
        out = out if image.ndim == 3 else out[..., 0]
    new = _affine_points(segs, mat, off) if len(segs) else segs.copy()
    new, ex = clip_segments_to_image(new, s, extra=list(extra or []))
    if extra is None:
        return out, new
    return out, new, ex


# ----------------------------------------------------------------------------
# dataset level


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_offline_set(records, n_crops: int = 5, n_backgrounds: int = 5, rng=None, flips: bool = True,
                     cfg: Optional[AugmentConfig] = None, background_source=None) -> list:
    """Crops (plus horizontal flips) of each record, each recomposited over new backgrounds.

    Emits ``n_crops * (2 if flips else 1) * n_backgrounds`` records per input.
    With ``n_crops=1`` the single crop is the whole image (no zoom, no
    rotation), so only the background changes.
    """
    cfg = cfg or AugmentConfig()
    files = list_backgrounds(background_source)
    if isinstance(rng, np.random.Generator):
        base_seed = int(rng.integers(2 ** 31))
    else:
        base_seed = int(rng or 0)
    out = []
    for rec in records:
        size = rec.size
        alpha = rec.alpha if rec.alpha is not None else np.zeros(rec.image.shape[:2])
        fg = rec.foreground if rec.foreground is not None else np.zeros(rec.image.shape)
        # alpha and premultiplied color ride along as extra channels
        stack = np.concatenate([fg, alpha[..., None]], axis=-1)
        extra = [rec.cable_ids, rec.widths]
        for k in range(n_crops):
            crop_rng = np.random.default_rng(_child_seed(base_seed, rec.seed, k))
            if n_crops == 1:
                frac, theta = 1.0, 0.0
            else:
                frac = crop_rng.uniform(*cfg.zoom)
                theta = crop_rng.uniform(*cfg.rotation)
            origin = crop_rng.uniform(0.0, size - frac * size, 2)
            for flip in ((False, True) if flips else (False,)):
                warped, segs, ex = zoom_rotate_flip(
                    stack, rec.segments, frac, theta, flip_h=flip, crop_origin=origin,
                    extra=extra, fill=np.zeros(4),
                )
                a = warped[..., 3:4]
                for b in range(n_backgrounds):
                    seed = _child_seed(base_seed, rec.seed, k, int(flip), b)
                    bg = sample_background(files, np.random.default_rng(seed), size)
                    image = np.clip(bg * (1.0 - a) + warped[..., :3], 0.0, 1.0)
                    out.append(SampleRecord(
                        image=image, segments=segs, seed=seed,
                        provenance=f"offline(parent={rec.seed},crop={k},flip={int(flip)},bg={b})",
                        cable_ids=ex[0], alpha=a[..., 0].copy(), foreground=warped[..., :3].copy(),
                        widths=ex[1],
                    ))
    return out


def on_the_fly_augment(record: SampleRecord, cfg: AugmentConfig, rng: np.random.Generator) -> SampleRecord:
    """Apply noise, blur, color and elastic ops, each independently with probability ``p_apply``."""
    image = record.image
    segs = record.segments
    extra = [record.cable_ids, record.widths]
    applied = []
    if rng.random() < cfg.p_apply:
        image = add_gaussian_noise(image, cfg.noise_mu, rng.uniform(*cfg.noise_sigma), rng)
        applied.append("noise")
    if rng.random() < cfg.p_apply:
        sigma = rng.uniform(*cfg.blur_sigma)
        if sigma > 0:
            image = gaussian_blur(image, sigma, cfg.blur_kernel)
        applied.append("blur")
    if rng.random() < cfg.p_apply:
        image = color_jitter(image, dict(brightness=cfg.brightness, contrast=cfg.contrast,
                                         saturation=cfg.saturation, hue=cfg.hue), rng)
        if rng.random() < cfg.grayscale_p:
            image = grayscale_rgb(image)
        applied.append("color")
    if rng.random() < cfg.p_apply:
        image, segs, extra = elastic_transform(image, segs, rng.uniform(*cfg.elastic_alpha),
                                               rng.uniform(*cfg.elastic_sigma), rng, extra=extra)
        applied.append("elastic")
    if not applied:
        return record
    tag = record.provenance + ("+" if record.provenance else "") + ",".join(applied)
    return replace(record, image=image, segments=segs, provenance=tag, cable_ids=extra[0],
                   widths=extra[1], alpha=None, foreground=None)


# ----------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    image: str
    width: int
    height: int
    segments: np.ndarray
    seed: int
    root: Path = field(default=Path("."), repr=False)

    @property
    def path(self) -> Path:
        return self.root / self.image

    def load(self) -> SampleRecord:
        if not self.path.is_file():
            raise FileNotFoundError(f"image {self.path} listed in manifest is missing")
        return SampleRecord(image=load_image(self.path), segments=self.segments.copy(),
                            seed=self.seed, provenance=str(self.image))


def save_png(image, path):
    data = np.floor(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path)


def manifest_line(rel_path: str, size: int, segments, seed: int) -> str:
    segs = [[float(v) for v in s] for s in np.asarray(segments, dtype=np.float64).reshape(-1, 4)]
    return json.dumps({"image": rel_path, "width": int(size), "height": int(size),
                       "segments": segs, "seed": int(seed)})


def write_manifest(records, out_dir, name: str = "manifest.jsonl", image_dir: str = "images") -> Path:
    """Write PNGs under ``out_dir/image_dir`` and one JSON line per record."""
    out_dir = Path(out_dir)
    (out_dir / image_dir).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, rec in enumerate(records):
        rel = f"{image_dir}/{i:06d}.png"
        save_png(rec.image, out_dir / rel)
        lines.append(manifest_line(rel, rec.size, rec.segments, rec.seed))
    path = out_dir / name
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} not found")
    entries = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                segs = np.array(d["segments"], dtype=np.float64).reshape(-1, 4)
                entries.append(ManifestEntry(d["image"], int(d["width"]), int(d["height"]),
                                             segs, int(d.get("seed", 0)), root=path.parent))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{ln}: malformed manifest record ({exc})") from None
    return entries


def generate_records(n_images: int, seed: int, params: Optional[SceneParams] = None, size: int = 256) -> list:
    params = params or SceneParams()
    return [render_scene(params, size, _child_seed(seed, i)) for i in range(n_images)]


def generate_dataset(out_dir, n_images: int, seed: int, params: Optional[SceneParams] = None,
                     size: int = 256, name: str = "manifest.jsonl") -> Path:
    """Render ``n_images`` scenes and write them with a manifest; returns the manifest path."""
    return write_manifest(generate_records(n_images, seed, params, size), out_dir, name=name)


# The bundled desk-scale sets: (n_images, seed). They are regenerated on
# demand rather than shipped, and are byte-identical on every machine.
BUNDLED_SETS = {"train": (200, 1), "val": (20, 2), "eval": (50, 3)}


def bundled_records(name: str, size: int = 256, params: Optional[SceneParams] = None) -> list:
    if name not in BUNDLED_SETS:
        raise ConfigError(f"unknown bundled set {name!r}; expected one of {sorted(BUNDLED_SETS)}")
    n, seed = BUNDLED_SETS[name]
    return generate_records(n, seed, params, size)
