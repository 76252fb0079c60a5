# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_pykernels`` for the contract."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, sqrt

cnp.import_array()


cdef inline bint _clip(double x1, double y1, double x2, double y2,
                       double bx0, double by0, double bx1, double by1,
                       double* t0_out, double* t1_out) noexcept nogil:
    cdef double dx = x2 - x1
    cdef double dy = y2 - y1
    cdef double t0 = 0.0
    cdef double t1 = 1.0
    cdef double p[4]
    cdef double q[4]
    cdef double r
    cdef int i
    if dx == 0.0 and dy == 0.0:
        return False
    p[0] = -dx; q[0] = x1 - bx0
    p[1] = dx;  q[1] = bx1 - x1
    p[2] = -dy; q[2] = y1 - by0
    p[3] = dy;  q[3] = by1 - y1
    for i in range(4):
        if p[i] == 0.0:
            if q[i] < 0.0:
                return False
        else:
            r = q[i] / p[i]
            if p[i] < 0.0:
                if r > t0:
                    t0 = r
            elif r < t1:
                t1 = r
    if t0 >= t1:
        return False
    t0_out[0] = t0
    t1_out[0] = t1
    return True


cdef inline double _clampd(double v, double lo, double hi) noexcept nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def clip_segment(double x1, double y1, double x2, double y2,
                 double bx0, double by0, double bx1, double by1):
    cdef double t0, t1
    if _clip(x1, y1, x2, y2, bx0, by0, bx1, by1, &t0, &t1):
        return t0, t1
    return None


def encode_lattice(double[:, ::1] segs, int cell_size, int stride, int rows, int cols, double tau):
    labels_arr = np.full((rows, cols), -1, dtype=np.int8)
    coords_arr = np.zeros((rows, cols, 4), dtype=np.float64)
    best_arr = np.full((rows, cols), -1.0)
    cdef signed char[:, ::1] labels = labels_arr
    cdef double[:, :, ::1] coords = coords_arr
    cdef double[:, ::1] best = best_arr
    cdef double cs = cell_size
    cdef double x1, y1, x2, y2, seg_len, bx0, by0, t0, t1, piece
    cdef Py_ssize_t k, r, c
    cdef int r_lo, r_hi, c_lo, c_hi
    with nogil:
        for k in range(segs.shape[0]):
            x1 = segs[k, 0]; y1 = segs[k, 1]; x2 = segs[k, 2]; y2 = segs[k, 3]
            seg_len = sqrt((x2 - x1) * (x2 - x1) + (y2 - y1) * (y2 - y1))
            if seg_len == 0.0:
                continue
            c_lo = <int>ceil((min(x1, x2) - cs) / stride)
            if c_lo < 0:
                c_lo = 0
            c_hi = <int>floor(max(x1, x2) / stride)
            if c_hi > cols - 1:
                c_hi = cols - 1
            r_lo = <int>ceil((min(y1, y2) - cs) / stride)
            if r_lo < 0:
                r_lo = 0
            r_hi = <int>floor(max(y1, y2) / stride)
            if r_hi > rows - 1:
                r_hi = rows - 1
            for r in range(r_lo, r_hi + 1):
                by0 = <double>(stride * r)
                for c in range(c_lo, c_hi + 1):
                    bx0 = <double>(stride * c)
                    if not _clip(x1, y1, x2, y2, bx0, by0, bx0 + cs, by0 + cs, &t0, &t1):
                        continue
                    piece = (t1 - t0) * seg_len
                    if piece <= tau or piece <= best[r, c]:
                        continue
                    best[r, c] = piece
                    labels[r, c] = 1
                    coords[r, c, 0] = (_clampd(x1 + t0 * (x2 - x1), bx0, bx0 + cs) - bx0) / cs
                    coords[r, c, 1] = (_clampd(y1 + t0 * (y2 - y1), by0, by0 + cs) - by0) / cs
                    coords[r, c, 2] = (_clampd(x1 + t1 * (x2 - x1), bx0, bx0 + cs) - bx0) / cs
                    coords[r, c, 3] = (_clampd(y1 + t1 * (y2 - y1), by0, by0 + cs) - by0) / cs
    return labels_arr, coords_arr


cdef Py_ssize_t _line(long x0, long y0, long x1, long y1, long[:, ::1] out) noexcept nogil:
    # writes the canonical-direction line into out; returns pixel count
    cdef long dx = x1 - x0 if x1 >= x0 else x0 - x1
    cdef long dy = y1 - y0 if y1 >= y0 else y0 - y1
    cdef long sx = 1 if x1 >= x0 else -1
    cdef long sy = 1 if y1 >= y0 else -1
    cdef long x = x0, y = y0, d
    cdef Py_ssize_t i, n
    if dx >= dy:
        n = dx + 1
        d = 2 * dy - dx
        for i in range(n):
            out[i, 0] = x; out[i, 1] = y
            if d >= 0:
                y += sy
                d -= 2 * dx
            d += 2 * dy
            x += sx
    else:
        n = dy + 1
        d = 2 * dx - dy
        for i in range(n):
            out[i, 0] = x; out[i, 1] = y
            if d >= 0:
                x += sx
                d -= 2 * dy
            d += 2 * dx
            y += sy
    return n


def bresenham(long x0, long y0, long x1, long y1):
    cdef bint swapped = (x1, y1) < (x0, y0)
    if swapped:
        x0, y0, x1, y1 = x1, y1, x0, y0
    n = max(abs(x1 - x0), abs(y1 - y0)) + 1
    pts = np.empty((n, 2), dtype=np.int64)
    cdef long[:, ::1] view = pts
    _line(x0, y0, x1, y1, view)
    if swapped:
        pts = pts[::-1].copy()
    return pts


cdef inline long _pixel_index(double v, long hi) noexcept nogil:
    cdef long r = <long>floor(v)
    if r < 0:
        return 0
    if r > hi:
        return hi
    return r


def rasterize_max(double[:, ::1] segs, double[::1] confs, int width, int height, int wl):
    out_arr = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef long lo = -((wl - 1) // 2)
    cdef long hi = wl // 2
    cdef long maxlen = max(width, height) + 1
    buf_arr = np.empty((maxlen, 2), dtype=np.int64)
    cdef long[:, ::1] buf = buf_arr
    cdef long x0, y0, x1, y1, t, px, py, xx, yy, ya, yb, xa, xb
    cdef Py_ssize_t k, i, n
    cdef double conf
    with nogil:
        for k in range(segs.shape[0]):
            x0 = _pixel_index(segs[k, 0], width - 1)
            y0 = _pixel_index(segs[k, 1], height - 1)
            x1 = _pixel_index(segs[k, 2], width - 1)
            y1 = _pixel_index(segs[k, 3], height - 1)
            if x1 < x0 or (x1 == x0 and y1 < y0):
                t = x0; x0 = x1; x1 = t
                t = y0; y0 = y1; y1 = t
            conf = confs[k]
            n = _line(x0, y0, x1, y1, buf)
            for i in range(n):
                px = buf[i, 0]; py = buf[i, 1]
                ya = py + lo
                if ya < 0:
                    ya = 0
                yb = py + hi
                if yb > height - 1:
                    yb = height - 1
                xa = px + lo
                if xa < 0:
                    xa = 0
                xb = px + hi
                if xb > width - 1:
                    xb = width - 1
                for yy in range(ya, yb + 1):
                    for xx in range(xa, xb + 1):
                        if out[yy, xx] < conf:
                            out[yy, xx] = conf
    return out_arr
