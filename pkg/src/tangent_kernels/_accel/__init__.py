"""Backend selection for the hot kernel loops.

The compiled Cython core is used when available; setting
``TANGENT_KERNELS_BACKEND=python`` forces the pure-numpy fallback, and
``TANGENT_KERNELS_BACKEND=compiled`` makes a missing extension an error.
Both backends implement identical semantics.
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from . import fallback

_requested = os.environ.get("TANGENT_KERNELS_BACKEND", "").lower()

_core = None
if _requested in ("", "compiled"):
    try:
        _core = importlib.import_module(__name__ + "._core")
    except ImportError:
        if _requested == "compiled":
            raise
elif _requested != "python":
    raise RuntimeError(
        f"TANGENT_KERNELS_BACKEND must be 'python' or 'compiled', got {_requested!r}")

BACKEND = "compiled" if _core is not None else "python"


def _flat_f64(arr, shape):
    return np.ascontiguousarray(np.broadcast_to(arr, shape), dtype=np.float64).ravel()


def abrelu_moments(cov, v1, v2, a, b, want_tdot=True):
    """E[phi(u) phi(v)] and E[phi'(u) phi'(v)] for phi = a*min(.,0)+b*max(.,0)."""
    if _core is None:
        return fallback.abrelu_moments(cov, v1, v2, a, b, want_tdot)
    shape = np.broadcast_shapes(np.shape(cov), np.shape(v1), np.shape(v2))
    c = _flat_f64(cov, shape)
    t = np.empty(c.size)
    td = np.empty(c.size) if want_tdot else np.empty(0)
    _core.abrelu_flat(c, _flat_f64(v1, shape), _flat_f64(v2, shape),
                      float(a), float(b), t, td, want_tdot)
    return t.reshape(shape), (td.reshape(shape) if want_tdot else None)


def erf_moments(cov, v1, v2, want_tdot=True):
    """E[erf(u) erf(v)] and E[erf'(u) erf'(v)]."""
    if _core is None:
        return fallback.erf_moments(cov, v1, v2, want_tdot)
    shape = np.broadcast_shapes(np.shape(cov), np.shape(v1), np.shape(v2))
    c = _flat_f64(cov, shape)
    t = np.empty(c.size)
    td = np.empty(c.size) if want_tdot else np.empty(0)
    _core.erf_flat(c, _flat_f64(v1, shape), _flat_f64(v2, shape), t, td, want_tdot)
    return t.reshape(shape), (td.reshape(shape) if want_tdot else None)


def conv_accumulate_marginal(padded, filter_hw, strides, out_hw, scale):
    """Filter-window sum on the trailing (H, W) axes (same-pixel blocks)."""
    if _core is None:
        return fallback.conv_accumulate_marginal(padded, filter_hw, strides, out_hw, scale)
    lead = padded.shape[:-2]
    flat = np.ascontiguousarray(padded, dtype=np.float64).reshape(
        (-1,) + padded.shape[-2:])
    out = _core.conv_accumulate_marginal(
        flat, filter_hw[0], filter_hw[1], strides[0], strides[1],
        out_hw[0], out_hw[1], float(scale))
    return out.reshape(lead + tuple(out_hw))


def conv_accumulate_full(padded, filter_hw, strides, out_hw, scale):
    """Filter-window sum on the trailing (H, W, H', W') axes."""
    if _core is None:
        return fallback.conv_accumulate_full(padded, filter_hw, strides, out_hw, scale)
    lead = padded.shape[:-4]
    flat = np.ascontiguousarray(padded, dtype=np.float64).reshape(
        (-1,) + padded.shape[-4:])
    out = _core.conv_accumulate_full(
        flat, filter_hw[0], filter_hw[1], strides[0], strides[1],
        out_hw[0], out_hw[1], float(scale))
    oh, ow = out_hw
    return out.reshape(lead + (oh, ow, oh, ow))
