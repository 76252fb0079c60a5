"""Pure Python/numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled path is tested against. Function signatures and
results match ``_ckernels`` exactly.
"""

import numpy as np


def clip_segment(x1, y1, x2, y2, bx0, by0, bx1, by1):
    """Liang-Barsky clip of a segment to the closed box [bx0,bx1] x [by0,by1].

    Returns ``(t0, t1)`` parameters of the surviving piece, or None when the
    intersection is empty or a single point.
    """
    dx = x2 - x1
    dy = y2 - y1
    if dx == 0.0 and dy == 0.0:
        return None
    t0 = 0.0
    t1 = 1.0
    for p, q in ((-dx, x1 - bx0), (dx, bx1 - x1), (-dy, y1 - by0), (dy, by1 - y1)):
        if p == 0.0:
            if q < 0.0:
                return None
        else:
            r = q / p
            if p < 0.0:
                if r > t0:
                    t0 = r
            elif r < t1:
                t1 = r
    if t0 >= t1:
        return None
    return t0, t1


def encode_lattice(segs, cell_size, stride, rows, cols, tau):
    """Longest-piece target encoding over the lattice.

    ``segs`` is an (N, 4) float64 array. Returns ``(labels, coords)`` with
    labels int8 in {+1, -1} of shape (rows, cols) and coords float64 of shape
    (rows, cols, 4).
    """
    labels = np.full((rows, cols), -1, dtype=np.int8)
    coords = np.zeros((rows, cols, 4), dtype=np.float64)
    best = np.full((rows, cols), -1.0)
    cs = float(cell_size)
    for k in range(segs.shape[0]):
        x1, y1, x2, y2 = (float(v) for v in segs[k])
        seg_len = np.hypot(x2 - x1, y2 - y1)
        if seg_len == 0.0:
            continue
        # candidate cells: boxes [s*c, s*c + cs] overlapping the segment bbox
        c_lo = max(0, int(np.ceil((min(x1, x2) - cs) / stride)))
        c_hi = min(cols - 1, int(np.floor(max(x1, x2) / stride)))
        r_lo = max(0, int(np.ceil((min(y1, y2) - cs) / stride)))
        r_hi = min(rows - 1, int(np.floor(max(y1, y2) / stride)))
        for r in range(r_lo, r_hi + 1):
            by0 = float(stride * r)
            for c in range(c_lo, c_hi + 1):
                bx0 = float(stride * c)
                res = clip_segment(x1, y1, x2, y2, bx0, by0, bx0 + cs, by0 + cs)
                if res is None:
                    continue
                t0, t1 = res
                piece = (t1 - t0) * seg_len
                if piece <= tau or piece <= best[r, c]:
                    continue
                best[r, c] = piece
                labels[r, c] = 1
                px1 = min(max(x1 + t0 * (x2 - x1), bx0), bx0 + cs)
                py1 = min(max(y1 + t0 * (y2 - y1), by0), by0 + cs)
                px2 = min(max(x1 + t1 * (x2 - x1), bx0), bx0 + cs)
                py2 = min(max(y1 + t1 * (y2 - y1), by0), by0 + cs)
                coords[r, c, 0] = (px1 - bx0) / cs
                coords[r, c, 1] = (py1 - by0) / cs
                coords[r, c, 2] = (px2 - bx0) / cs
                coords[r, c, 3] = (py2 - by0) / cs
    return labels, coords


def bresenham(x0, y0, x1, y1):
    """8-connected integer line from (x0, y0) to (x1, y1), both included.

    Runs from the lexicographically smaller endpoint so that ties resolve the
    same way in both directions; the result is reversed if needed.
    Returns an (K, 2) int64 array of (x, y).
    """
    swapped = (x1, y1) < (x0, y0)
    if swapped:
        x0, y0, x1, y1 = x1, y1, x0, y0
    dx = abs(x1 - x0)
    dy = abs(y1 - y0)
    sx = 1 if x1 >= x0 else -1
    sy = 1 if y1 >= y0 else -1
    out = []
    x, y = x0, y0
    if dx >= dy:
        d = 2 * dy - dx
        for _ in range(dx + 1):
            out.append((x, y))
            if d >= 0:
                y += sy
                d -= 2 * dx
            d += 2 * dy
            x += sx
    else:
        d = 2 * dx - dy
        for _ in range(dy + 1):
            out.append((x, y))
            if d >= 0:
                x += sx
                d -= 2 * dy
            d += 2 * dx
            y += sy
    pts = np.array(out, dtype=np.int64).reshape(-1, 2)
    if swapped:
        pts = pts[::-1].copy()
    return pts


def _pixel_index(v, hi):
    # pixel j spans [j, j+1): nearest pixel center, ties upward
    return min(max(int(np.floor(v)), 0), hi)


def rasterize_max(segs, confs, width, height, wl):
    """Max-confidence raster of width-dilated Bresenham lines.

    Each pixel of a line is dilated by a ``wl`` x ``wl`` square covering
    offsets ``[-(wl-1)//2, wl//2]`` on both axes.
    """
    out = np.zeros((height, width), dtype=np.float64)
    lo = -((wl - 1) // 2)
    hi = wl // 2
    for k in range(segs.shape[0]):
        x0 = _pixel_index(segs[k, 0], width - 1)
        y0 = _pixel_index(segs[k, 1], height - 1)
        x1 = _pixel_index(segs[k, 2], width - 1)
        y1 = _pixel_index(segs[k, 3], height - 1)
        conf = float(confs[k])
        for px, py in bresenham(x0, y0, x1, y1):
            ya = max(py + lo, 0)
            yb = min(py + hi, height - 1) + 1
            xa = max(px + lo, 0)
            xb = min(px + hi, width - 1) + 1
            np.maximum(out[ya:yb, xa:xb], conf, out=out[ya:yb, xa:xb])
    return out
