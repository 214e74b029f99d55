"""Row-wise numeric kernels with a compiled fast path.

The Cython extension ``_ckernels`` is used when it has been built; otherwise
the numpy implementation in ``_fallback`` is selected. Setting the
environment variable ``MIMAE_PURE_PYTHON=1`` forces the fallback.

All kernels operate on C-contiguous 2-D arrays (rows x features).
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("MIMAE_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback


def available_backends():
    """Names of the backends that can be loaded in this environment."""
    return ["cython", "python"] if _compiled is not None else ["python"]


def get_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _fallback
    if name == "cython" and _compiled is not None:
        return _compiled
    raise ValueError(f"kernel backend {name!r} is not available")


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def layer_norm_fwd(x, gain, bias, eps):
    x = _c(x)
    return _impl.layer_norm_fwd(x, _c(gain, x.dtype), _c(bias, x.dtype), float(eps))


def layer_norm_bwd(dy, xhat, rstd, gain):
    dt = xhat.dtype
    return _impl.layer_norm_bwd(_c(dy, dt), _c(xhat), _c(rstd, dt), _c(gain, dt))


def softmax_fwd(x):
    return _impl.softmax_fwd(_c(x))


def softmax_bwd(y, dy):
    return _impl.softmax_bwd(_c(y), _c(dy, y.dtype))


def gelu_fwd(x):
    return _impl.gelu_fwd(_c(x))


def gelu_bwd(x, dy):
    return _impl.gelu_bwd(_c(x), _c(dy, x.dtype))
