"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy versions
take over. Set ``HCPL_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from hcpl import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HCPL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from hcpl import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, stride=1):
    """Valid cross-correlation of padded ``x`` (N,C,H,W) with ``w`` (O,C,k,k)."""
    return _impl.conv2d_forward(_c(x), _c(w), int(stride))


def conv2d_backward(x, w, gout, stride=1):
    """Return ``(grad_x, grad_w)`` for :func:`conv2d_forward`."""
    return _impl.conv2d_backward(_c(x), _c(w), _c(gout), int(stride))


def geodesic_grow(seeds, foreground):
    seeds = np.ascontiguousarray(seeds, dtype=np.int32)
    fg = np.ascontiguousarray(foreground, dtype=np.uint8)
    return np.asarray(_impl.geodesic_grow(seeds, fg), dtype=np.int32)


def use_backend(name):
    """Switch backend at runtime (``"cython"`` or ``"python"``); used by the benchmark."""
    global _impl, BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from hcpl import _ckernels

        _impl = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
