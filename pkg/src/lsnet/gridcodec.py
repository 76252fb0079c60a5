"""Four-overlapping-grid geometry and target encoding.

The main, horizontal, vertical and center grids are realized as the four
parity classes of a single ``(2*S_m - 1) x (2*S_m - 1)`` lattice of
``cell_size`` boxes placed every ``cell_size / 2`` pixels:

    (even row, even col) -> main
    (even row, odd col)  -> horizontal
    (odd row,  even col) -> vertical
    (odd row,  odd col)  -> center

Lattice arrays are indexed ``[row, col]`` with row along y (downward) and
col along x (rightward).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from lsnet import kernels
from lsnet.errors import ConfigError, ContractError

GRID_CLASSES = ("main", "horizontal", "vertical", "center")
_CLASS_PARITY = {
    "main": (0, 0),
    "horizontal": (0, 1),
    "vertical": (1, 0),
    "center": (1, 1),
}
_CLASS_LETTER = {"main": "M", "horizontal": "H", "vertical": "V", "center": "C"}
_LETTER_CLASS = {v: k for k, v in _CLASS_LETTER.items()}

DEFAULT_TAU_LEN = 2.0


@dataclass(frozen=True)
class LineSegment:
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: Optional[float] = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ContractError(f"non-finite segment coordinates: {self}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)

    def as_tuple(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)

    def swapped(self) -> "LineSegment":
        return LineSegment(self.x2, self.y2, self.x1, self.y1, self.confidence)

    def same_geometry(self, other: "LineSegment", tol: float = 0.0) -> bool:
        """Order-free endpoint equality within ``tol`` per coordinate."""
        a = np.array(self.as_tuple())
        b = np.array(other.as_tuple())
        return bool(
            np.all(np.abs(a - b) <= tol) or np.all(np.abs(a - b[[2, 3, 0, 1]]) <= tol)
        )


@dataclass(frozen=True)
class GridSpec:
    image_width: int
    image_height: int
    cell_size: int
    stride: int
    s_main: int
    s_aux: int
    lattice_rows: int
    lattice_cols: int

    @property
    def lattice_shape(self) -> tuple:
        return (self.lattice_rows, self.lattice_cols)


@dataclass(frozen=True)
class LatticePosition:
    row: int
    col: int


@dataclass
class TargetTensor:
    labels: np.ndarray  # int8 [R, C], values in {+1, -1}
    coords: np.ndarray  # float64 [R, C, 4], zero where label is -1


def build_grid_spec(image_size, cell_size: int) -> GridSpec:
    """Lattice geometry for a square ``image_size`` image and ``cell_size`` cells.

    ``image_size`` may be an int or a ``(width, height)`` pair; non-square
    sizes are rejected.
    """
    if isinstance(image_size, (tuple, list)):
        width, height = (int(v) for v in image_size)
    else:
        width = height = int(image_size)
    cell_size = int(cell_size)
    if width != height:
        raise ConfigError(f"image must be square, got {width}x{height}; pad or crop first")
    if cell_size <= 0 or cell_size % 2:
        raise ConfigError(f"cell_size must be a positive even number, got {cell_size}")
    if width < cell_size:
        raise ConfigError(f"image_size {width} smaller than cell_size {cell_size}")
    if width % cell_size:
        raise ConfigError(f"image_size {width} not divisible by cell_size {cell_size}")
    s_main = width // cell_size
    stride = cell_size // 2
    side = 2 * s_main - 1
    assert side == (width - cell_size) // stride + 1
    return GridSpec(width, height, cell_size, stride, s_main, s_main - 1, side, side)


def cell_box(spec: GridSpec, pos) -> tuple:
    """Pixel box ``(x0, y0, width, height)`` of a lattice cell."""
    row, col = (pos.row, pos.col) if isinstance(pos, LatticePosition) else pos
    if not (0 <= row < spec.lattice_rows and 0 <= col < spec.lattice_cols):
        raise IndexError(f"lattice position ({row}, {col}) outside {spec.lattice_shape}")
    return (spec.stride * col, spec.stride * row, spec.cell_size, spec.cell_size)


def clip_segment_to_box(seg: LineSegment, box) -> Optional[LineSegment]:
    """Intersection of ``seg`` with the closed box ``(x0, y0, w, h)``.

    Returns None for an empty or single-point intersection.
    """
    x0, y0, w, h = box
    res = kernels.clip_segment(
        float(seg.x1), float(seg.y1), float(seg.x2), float(seg.y2),
        float(x0), float(y0), float(x0 + w), float(y0 + h),
    )
    if res is None:
        return None
    t0, t1 = res
    dx = seg.x2 - seg.x1
    dy = seg.y2 - seg.y1

    def clamp(v, lo, hi):
        return min(max(v, lo), hi)

    return LineSegment(
        clamp(seg.x1 + t0 * dx, x0, x0 + w),
        clamp(seg.y1 + t0 * dy, y0, y0 + h),
        clamp(seg.x1 + t1 * dx, x0, x0 + w),
        clamp(seg.y1 + t1 * dy, y0, y0 + h),
        seg.confidence,
    )


def segments_to_array(segments) -> np.ndarray:
    """(N, 4) float64 array from LineSegments or any sequence of 4-tuples."""
    if isinstance(segments, np.ndarray):
        arr = np.asarray(segments, dtype=np.float64).reshape(-1, 4)
    else:
        rows = [s.as_tuple() if isinstance(s, LineSegment) else tuple(s)[:4] for s in segments]
        arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return np.ascontiguousarray(arr)


def encode_targets(segments, spec: GridSpec, tau_len: float = DEFAULT_TAU_LEN) -> TargetTensor:
    """Label each lattice cell with the longest clipped segment piece.

    Pieces of length ``<= tau_len`` are ignored; ties on length go to the
    segment listed first. Coordinates are normalized to the cell box and keep
    the input endpoint order.
    """
    if tau_len < 0:
        raise ConfigError(f"tau_len must be >= 0, got {tau_len}")
    arr = segments_to_array(segments)
    labels, coords = kernels.encode_lattice(
        arr, spec.cell_size, spec.stride, spec.lattice_rows, spec.lattice_cols, float(tau_len)
    )
    return TargetTensor(labels=labels, coords=coords)


def decode_predictions(class_probs, coords, spec: GridSpec, conf_threshold: float = 0.5) -> list:
    """Global-coordinate segments for every cell with ``p > conf_threshold``.

    Detections from all four parity classes are concatenated in row-major
    lattice order; nothing is merged or suppressed.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if probs.ndim == 3 and probs.shape[-1] == 1:
        probs = probs[..., 0]
    if probs.shape != spec.lattice_shape or coords.shape != spec.lattice_shape + (4,):
        raise ContractError(
            f"expected probs {spec.lattice_shape} and coords {spec.lattice_shape + (4,)}, "
            f"got {probs.shape} and {coords.shape}"
        )
    rows, cols = np.nonzero(probs > conf_threshold)
    clamped = np.clip(coords[rows, cols], 0.0, 1.0) * spec.cell_size
    ox = (cols * spec.stride).astype(np.float64)
    oy = (rows * spec.stride).astype(np.float64)
    out = []
    for i in range(rows.size):
        out.append(
            LineSegment(
                ox[i] + clamped[i, 0],
                oy[i] + clamped[i, 1],
                ox[i] + clamped[i, 2],
                oy[i] + clamped[i, 3],
                float(probs[rows[i], cols[i]]),
            )
        )
    return out


def parse_grid_classes(classes) -> tuple:
    """Normalize a grid-class selection to canonical names.

    Accepts an iterable of names (``"main"``...) or a letter string such as
    ``"MHVC"``.
    """
    if isinstance(classes, str):
        if classes in GRID_CLASSES:
            classes = [classes]
        else:
            try:
                classes = [_LETTER_CLASS[ch] for ch in classes.upper()]
            except KeyError as exc:
                raise ConfigError(f"unknown grid letter {exc.args[0]!r} in {classes!r}") from None
    names = []
    for c in classes:
        if c not in _CLASS_PARITY:
            raise ConfigError(f"unknown grid class {c!r}; expected one of {GRID_CLASSES}")
        if c not in names:
            names.append(c)
    if not names:
        raise ConfigError("grid class selection must be non-empty")
    return tuple(sorted(names, key=GRID_CLASSES.index))


def grid_letters(classes) -> str:
    return "".join(_CLASS_LETTER[c] for c in parse_grid_classes(classes))


def parity_class_of(row: int, col: int) -> str:
    parity = (row % 2, col % 2)
    for name, p in _CLASS_PARITY.items():
        if p == parity:
            return name
    raise AssertionError(parity)


def parity_mask(shape: Sequence[int], classes: Iterable[str]) -> np.ndarray:
    """Boolean [R, C] mask that is True on the selected parity classes."""
    rows, cols = shape
    names = parse_grid_classes(classes)
    r = np.arange(rows)[:, None] % 2
    c = np.arange(cols)[None, :] % 2
    mask = np.zeros((rows, cols), dtype=bool)
    for name in names:
        pr, pc = _CLASS_PARITY[name]
        mask |= (r == pr) & (c == pc)
    return mask


def mask_parity_classes(target_or_prediction, classes):
    """Suppress every lattice position outside ``classes``.

    A TargetTensor gets label -1 and zeroed coords there; a probability array
    of shape (R, C) or (R, C, k) gets zeros. A new object is returned.
    """
    if isinstance(target_or_prediction, TargetTensor):
        mask = parity_mask(target_or_prediction.labels.shape, classes)
        labels = target_or_prediction.labels.copy()
        coords = target_or_prediction.coords.copy()
        labels[~mask] = -1
        coords[~mask] = 0.0
        return TargetTensor(labels, coords)
    arr = np.array(target_or_prediction, dtype=np.float64, copy=True)
    mask = parity_mask(arr.shape[:2], classes)
    arr[~mask] = 0.0
    return arr
