"""Independent reference implementations used only by the tests."""

import numpy as np


def otsu_bruteforce(levels):
    """Lowest k maximizing the between-class variance, by direct class statistics."""
    levels = np.asarray(levels).ravel()
    best, best_k = -1.0, None
    n = levels.size
    for k in range(256):
        lo = levels[levels <= k]
        hi = levels[levels > k]
        if lo.size == 0 or hi.size == 0:
            continue
        v = (lo.size / n) * (hi.size / n) * (hi.mean() - lo.mean()) ** 2
        if v > best * (1 + 1e-12) + 1e-300:
            best, best_k = v, k
    return best_k


def midpoint_line(x0, y0, x1, y1):
    """Midpoint line by rounding the exact line at each major-axis step.

    Steps from the lexicographically smaller endpoint; a pixel is taken as
    floor(v + 0.5) of the exact minor coordinate (half-up), which is what the
    integer decision variable with ``d >= 0`` encodes.
    """
    rev = (x1, y1) < (x0, y0)
    if rev:
        x0, y0, x1, y1 = x1, y1, x0, y0
    dx, dy = x1 - x0, y1 - y0
    pts = []
    if abs(dx) >= abs(dy):
        n = abs(dx)
        for i in range(n + 1):
            x = x0 + (i if dx >= 0 else -i)
            # minor coordinate moves away from the start; round half away from y0
            frac = 0 if n == 0 else abs(dy) * i / n
            y = y0 + int(np.floor(frac + 0.5)) * (1 if dy >= 0 else -1)
            pts.append((x, y))
    else:
        n = abs(dy)
        for i in range(n + 1):
            y = y0 + (i if dy >= 0 else -i)
            frac = abs(dx) * i / n
            x = x0 + int(np.floor(frac + 0.5)) * (1 if dx >= 0 else -1)
            pts.append((x, y))
    return pts[::-1] if rev else pts
