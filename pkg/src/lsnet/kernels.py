"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` is used. Setting ``LSNET_PURE_PYTHON=1``
forces the fallback.
"""

import os

from lsnet import _pykernels

if os.environ.get("LSNET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from lsnet import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

clip_segment = _impl.clip_segment
encode_lattice = _impl.encode_lattice
bresenham = _impl.bresenham
rasterize_max = _impl.rasterize_max

__all__ = ["BACKEND", "clip_segment", "encode_lattice", "bresenham", "rasterize_max"]
