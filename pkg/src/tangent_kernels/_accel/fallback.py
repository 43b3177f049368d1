"""Pure-numpy implementations of the hot kernel loops.

These are the reference semantics for the compiled extension in
``_core.pyx``; the two backends must agree to floating-point roundoff.
"""

from __future__ import annotations

import numpy as np

_TWO_PI = 2.0 * np.pi


def abrelu_moments(cov, v1, v2, a, b, want_tdot=True):
    """Gaussian moments of the a*min(x,0)+b*max(x,0) nonlinearity.

    Given entrywise covariances ``cov`` and the matching variances ``v1``,
    ``v2`` (broadcastable), returns E[phi(u) phi(v)] and, optionally,
    E[phi'(u) phi'(v)] for (u, v) zero-mean Gaussian.  Zero-variance entries
    are defined as 0 (degenerate Gaussian limit).
    """
    cov = np.asarray(cov, dtype=np.float64)
    prod = np.asarray(v1, dtype=np.float64) * np.asarray(v2, dtype=np.float64)
    sq = np.sqrt(np.maximum(prod, 0.0))
    nonzero = sq > 0.0
    rho = np.where(nonzero, cov, 0.0) / np.where(nonzero, sq, 1.0)
    rho = np.clip(rho, -1.0, 1.0)
    theta = np.arccos(rho)
    sin_t = np.sqrt(np.maximum(1.0 - rho * rho, 0.0))
    apb = a * a + b * b
    ab2 = 2.0 * a * b
    t = (sq / _TWO_PI) * (apb * (sin_t + (np.pi - theta) * rho)
                          - ab2 * (sin_t - theta * rho))
    t = np.where(nonzero, t, 0.0)
    if not want_tdot:
        return t, None
    tdot = (apb * (np.pi - theta) + ab2 * theta) / _TWO_PI
    tdot = np.where(nonzero, tdot, 0.0)
    return t, tdot


def erf_moments(cov, v1, v2, want_tdot=True):
    """Gaussian moments of the error-function nonlinearity."""
    cov = np.asarray(cov, dtype=np.float64)
    d1 = 1.0 + 2.0 * np.asarray(v1, dtype=np.float64)
    d2 = 1.0 + 2.0 * np.asarray(v2, dtype=np.float64)
    dd = d1 * d2
    arg = np.clip(2.0 * cov / np.sqrt(dd), -1.0, 1.0)
    t = (2.0 / np.pi) * np.arcsin(arg)
    if not want_tdot:
        return t, None
    tdot = (4.0 / np.pi) / np.sqrt(np.maximum(dd - 4.0 * cov * cov, 1e-300))
    return t, tdot


def conv_accumulate_marginal(padded, filter_hw, strides, out_hw, scale):
    """Windowed sum over the trailing (H, W) axes, same shift on both
    members of the (collapsed) pixel pair: out <- scale * sum_offsets."""
    qh, qw = filter_hw
    sh, sw = strides
    oh, ow = out_hw
    out = np.zeros(padded.shape[:-2] + (oh, ow), dtype=padded.dtype)
    for dh in range(qh):
        hs = slice(dh, dh + sh * (oh - 1) + 1, sh)
        for dw in range(qw):
            ws = slice(dw, dw + sw * (ow - 1) + 1, sw)
            out += padded[..., hs, ws]
    out *= scale
    return out


def conv_accumulate_full(padded, filter_hw, strides, out_hw, scale):
    """Windowed sum over the trailing (H, W, H', W') axes with the same
    offset applied to both pixel-pair members."""
    qh, qw = filter_hw
    sh, sw = strides
    oh, ow = out_hw
    out = np.zeros(padded.shape[:-4] + (oh, ow, oh, ow), dtype=padded.dtype)
    for dh in range(qh):
        hs = slice(dh, dh + sh * (oh - 1) + 1, sh)
        for dw in range(qw):
            ws = slice(dw, dw + sw * (ow - 1) + 1, sw)
            out += padded[..., hs, ws, hs, ws]
    out *= scale
    return out
