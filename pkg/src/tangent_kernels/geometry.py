"""Convolution and pooling geometry shared by finite nets and kernel ops.

All padding arithmetic lives here so the finite forward pass and the kernel
covariance operator agree on window placement by construction.  CIRCULAR
padding wraps indices (and preserves the spatial shape under unit strides);
SAME and VALID follow standard convolution arithmetic with zero fill.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def out_size(n: int, q: int, s: int, padding: str) -> int:
    if padding == "VALID":
        return (n - q) // s + 1
    # SAME and CIRCULAR
    return -(-n // s)


def _pads(n: int, q: int, s: int, padding: str) -> tuple[int, int]:
    if padding == "VALID":
        return 0, 0
    o = out_size(n, q, s, padding)
    total = max((o - 1) * s + q - n, 0)
    begin = total // 2
    return begin, total - begin


@dataclass(frozen=True)
class ConvGeom:
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    filter_hw: tuple[int, int]
    strides: tuple[int, int]
    pad_begin: tuple[int, int]
    pad_end: tuple[int, int]
    circular: bool

    @property
    def filter_pixels(self) -> int:
        return self.filter_hw[0] * self.filter_hw[1]


def conv_geom(in_hw, filter_hw, strides, padding: str) -> ConvGeom:
    h, w = in_hw
    qh, qw = filter_hw
    sh, sw = strides
    if padding == "VALID" and (h < qh or w < qw):
        raise ValueError(f"filter {filter_hw} larger than input {in_hw} with VALID padding")
    oh, ow = out_size(h, qh, sh, padding), out_size(w, qw, sw, padding)
    bh, eh = _pads(h, qh, sh, padding)
    bw, ew = _pads(w, qw, sw, padding)
    return ConvGeom(in_hw=(h, w), out_hw=(oh, ow), filter_hw=(qh, qw),
                    strides=(sh, sw), pad_begin=(bh, bw), pad_end=(eh, ew),
                    circular=(padding == "CIRCULAR"))


def pad_spatial(x: np.ndarray, geom: ConvGeom, axes: tuple[int, ...]) -> np.ndarray:
    """Pads the given (height, width[, height, width]) axes of ``x``.

    Zero fill for SAME/VALID, periodic wrap for CIRCULAR.  ``axes`` lists
    alternating height/width axes, so both spatial pairs of a FULL kernel
    tensor can be padded in one call.
    """
    pad = [(0, 0)] * x.ndim
    for k, ax in enumerate(axes):
        b = geom.pad_begin[k % 2]
        e = geom.pad_end[k % 2]
        pad[ax % x.ndim] = (b, e)
    if not any(p != (0, 0) for p in pad):
        return x
    mode = "wrap" if geom.circular else "constant"
    return np.pad(x, pad, mode=mode)


# ---------------------------------------------------------------------------
# Patch extraction for the finite network (NHWC layout)


def extract_patches(x: np.ndarray, geom: ConvGeom) -> np.ndarray:
    """im2col: (n, H, W, C) -> (n, oh, ow, qh * qw * C)."""
    n, _, _, c = x.shape
    (qh, qw), (sh, sw) = geom.filter_hw, geom.strides
    oh, ow = geom.out_hw
    padded = pad_spatial(x, geom, axes=(1, 2))
    patches = np.empty((n, oh, ow, qh, qw, c), dtype=x.dtype)
    for dh in range(qh):
        for dw in range(qw):
            patches[:, :, :, dh, dw, :] = padded[
                :, dh:dh + sh * (oh - 1) + 1:sh, dw:dw + sw * (ow - 1) + 1:sw, :]
    return patches.reshape(n, oh, ow, qh * qw * c)


def scatter_patches(dpatches: np.ndarray, geom: ConvGeom, in_shape) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: scatter-adds patch cotangents back.

    ``dpatches`` has shape (n, oh, ow, qh * qw * C); returns (n, H, W, C).
    For CIRCULAR padding the wrapped border contributions fold back in.
    """
    n, h, w, c = in_shape
    (qh, qw), (sh, sw) = geom.filter_hw, geom.strides
    oh, ow = geom.out_hw
    (bh, bw), (eh, ew) = geom.pad_begin, geom.pad_end
    dpatches = dpatches.reshape(n, oh, ow, qh, qw, c)
    dpadded = np.zeros((n, h + bh + eh, w + bw + ew, c), dtype=dpatches.dtype)
    for dh in range(qh):
        for dw in range(qw):
            dpadded[:, dh:dh + sh * (oh - 1) + 1:sh,
                    dw:dw + sw * (ow - 1) + 1:sw, :] += dpatches[:, :, :, dh, dw, :]
    if not geom.circular:
        return dpadded[:, bh:bh + h, bw:bw + w, :]
    dx = dpadded[:, bh:bh + h, bw:bw + w, :].copy()
    # Fold wrapped pads back onto the opposite edge.
    if bh:
        dx[:, h - bh:, :, :] += dpadded[:, :bh, bw:bw + w, :]
    if eh:
        dx[:, :eh, :, :] += dpadded[:, bh + h:, bw:bw + w, :]
    if bw:
        dx[:, :, w - bw:, :] += dpadded[:, bh:bh + h, :bw, :]
    if ew:
        dx[:, :, :ew, :] += dpadded[:, bh:bh + h, bw + w:, :]
    # Corner pads wrap in both axes.
    if bh and bw:
        dx[:, h - bh:, w - bw:, :] += dpadded[:, :bh, :bw, :]
    if bh and ew:
        dx[:, h - bh:, :ew, :] += dpadded[:, :bh, bw + w:, :]
    if eh and bw:
        dx[:, :eh, w - bw:, :] += dpadded[:, bh + h:, :bw, :]
    if eh and ew:
        dx[:, :eh, :ew, :] += dpadded[:, bh + h:, bw + w:, :]
    return dx
