"""Translation rules: propagating (NNGP, NTK) kernel pairs through a NetSpec.

Each tensor operation of the finite network corresponds to one deterministic
transformation of the kernel pair.  A single traversal produces both kernels;
the NNGP is an intermediate of the NTK recursion so requesting both costs no
extra pass.  All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _accel
from .geometry import conv_geom, pad_spatial
from .netspec import (ABRelu, AvgPool, Conv, Dense, Dropout, Erf, FanInSum,
                      FanOut, Flatten, GlobalAvgPool, Identity, NetSpec,
                      Parallel, Representation, RepresentationPlan, Serial,
                      plan_representation, validate)

__all__ = [
    "KernelPair", "NotGaussianError", "RepresentationError",
    "input_kernel", "dense_translate", "conv_translate", "nonlin_translate",
    "flatten_translate", "avgpool_translate", "globalavgpool_translate",
    "fanout_translate", "faninsum_translate", "dropout_translate",
    "kernel_fn",
]


class NotGaussianError(ValueError):
    """A nonlinearity was applied to a non-Gaussian (non-affine) signal."""


class RepresentationError(ValueError):
    """A kernel op received a representation it cannot operate on."""


@dataclass(frozen=True)
class KernelPair:
    """Propagating state of the kernel computation.

    ``nngp``/``ntk`` have identical shapes determined by ``representation``:
    (n1, n2), (n1, n2, H, W) or (n1, n2, H, W, H, W).  ``var1``/``var2`` hold
    the per-input self-covariance needed by nonlinearity transforms: shapes
    (n,), (n, H, W) or (n, H, W, H, W).  ``ntk`` is None when only the NNGP
    was requested.
    """

    nngp: np.ndarray
    ntk: Optional[np.ndarray]
    var1: np.ndarray
    var2: np.ndarray
    is_gaussian: bool
    representation: Representation
    spatial_shape: Optional[tuple[int, int]]
    x1_is_x2: bool


# ---------------------------------------------------------------------------
# Input layer


def input_kernel(x1, x2, n_features_axis_size=None, representation=Representation.VECTOR,
                 want_ntk=True, x1_is_x2=False):
    """Initial kernel: inner products over the channel/feature axis.

    The NTK of the input layer is identically zero and inputs are not
    Gaussian (no affine layer has acted yet).
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if representation is Representation.VECTOR:
        f = x1.shape[-1]
        nngp = np.einsum("if,jf->ij", x1, x2, optimize=False) / f
        var1 = np.einsum("if,if->i", x1, x1, optimize=False) / f
        var2 = var1 if x1_is_x2 else np.einsum("if,if->i", x2, x2, optimize=False) / f
        spatial = None
    elif representation is Representation.MARGINAL:
        c = x1.shape[-1]
        nngp = np.einsum("ihwc,jhwc->ijhw", x1, x2, optimize=False) / c
        var1 = np.einsum("ihwc,ihwc->ihw", x1, x1, optimize=False) / c
        var2 = var1 if x1_is_x2 else np.einsum("ihwc,ihwc->ihw", x2, x2, optimize=False) / c
        spatial = x1.shape[1:3]
    elif representation is Representation.FULL:
        c = x1.shape[-1]
        nngp = np.einsum("ihwc,jklc->ijhwkl", x1, x2, optimize=False) / c
        var1 = np.einsum("ihwc,iklc->ihwkl", x1, x1, optimize=False) / c
        var2 = var1 if x1_is_x2 else np.einsum("ihwc,iklc->ihwkl", x2, x2, optimize=False) / c
        spatial = x1.shape[1:3]
    else:
        raise RepresentationError(f"unknown representation {representation}")
    ntk = np.zeros_like(nngp) if want_ntk else None
    return KernelPair(nngp=nngp, ntk=ntk, var1=var1, var2=var2,
                      is_gaussian=False, representation=representation,
                      spatial_shape=spatial, x1_is_x2=x1_is_x2)


# ---------------------------------------------------------------------------
# Affine layers


def dense_translate(k: KernelPair, w_std: float, b_std: float) -> KernelPair:
    w2, b2 = w_std * w_std, b_std * b_std
    nngp = w2 * k.nngp + b2
    ntk = None if k.ntk is None else nngp + w2 * k.ntk
    var1 = w2 * k.var1 + b2
    var2 = var1 if k.x1_is_x2 else w2 * k.var2 + b2
    return replace(k, nngp=nngp, ntk=ntk, var1=var1, var2=var2, is_gaussian=True)


def conv_translate(k: KernelPair, filter_shape, strides, padding,
                   w_std: float, b_std: float) -> KernelPair:
    """Applies the covariance analog of convolution: an average of shifted
    kernel entries over the filter receptive field (same shift on both
    pixel indices), then the affine variance scaling."""
    if k.representation is Representation.VECTOR:
        raise RepresentationError("Conv cannot act on a VectorOnly kernel")
    geom = conv_geom(k.spatial_shape, filter_shape, strides, padding)
    scale = 1.0 / geom.filter_pixels
    w2, b2 = w_std * w_std, b_std * b_std

    if k.representation is Representation.MARGINAL:
        def op(t):
            padded = pad_spatial(t, geom, axes=(-2, -1))
            return _accel.conv_accumulate_marginal(
                padded, geom.filter_hw, geom.strides, geom.out_hw, scale)
    else:
        def op(t):
            padded = pad_spatial(t, geom, axes=(-4, -3, -2, -1))
            return _accel.conv_accumulate_full(
                padded, geom.filter_hw, geom.strides, geom.out_hw, scale)

    a_nngp = op(k.nngp)
    nngp = w2 * a_nngp + b2
    ntk = None if k.ntk is None else nngp + w2 * op(k.ntk)
    var1 = w2 * op(k.var1) + b2
    var2 = var1 if k.x1_is_x2 else w2 * op(k.var2) + b2
    return replace(k, nngp=nngp, ntk=ntk, var1=var1, var2=var2,
                   is_gaussian=True, spatial_shape=geom.out_hw)


# ---------------------------------------------------------------------------
# Nonlinearities


def _moments(phi, cov, v1, v2, want_tdot):
    if isinstance(phi, ABRelu):
        return _accel.abrelu_moments(cov, v1, v2, phi.a, phi.b, want_tdot)
    if isinstance(phi, Erf):
        return _accel.erf_moments(cov, v1, v2, want_tdot)
    raise TypeError(f"no closed-form transform for {type(phi).__name__}")


def _pixel_diag(var_full):
    # (n, H, W, H, W) -> (n, H, W) view of the equal-pixel entries
    return np.einsum("ihwhw->ihw", var_full)


def nonlin_translate(k: KernelPair, phi) -> KernelPair:
    """Entrywise Gaussian moment transform: nngp' = T(nngp), ntk' = Tdot * ntk."""
    if not k.is_gaussian:
        raise NotGaussianError(
            f"{type(phi).__name__} applied to a non-Gaussian signal; nonlinearities "
            "must be preceded by an affine layer")
    rep = k.representation
    want_tdot = k.ntk is not None
    if rep is Representation.VECTOR:
        v1 = k.var1[:, None]
        v2 = k.var2[None, :]
    elif rep is Representation.MARGINAL:
        v1 = k.var1[:, None, :, :]
        v2 = k.var2[None, :, :, :]
    else:
        d1 = _pixel_diag(k.var1)
        d2 = d1 if k.x1_is_x2 else _pixel_diag(k.var2)
        v1 = d1[:, None, :, :, None, None]
        v2 = d2[None, :, None, None, :, :]
    t, tdot = _moments(phi, k.nngp, v1, v2, want_tdot)
    ntk = None if k.ntk is None else tdot * k.ntk

    if rep is Representation.FULL:
        var1 = _moments(phi, k.var1, d1[:, :, :, None, None],
                        d1[:, None, None, :, :], False)[0]
        if k.x1_is_x2:
            var2 = var1
        else:
            var2 = _moments(phi, k.var2, d2[:, :, :, None, None],
                            d2[:, None, None, :, :], False)[0]
    else:
        var1 = _moments(phi, k.var1, k.var1, k.var1, False)[0]
        var2 = var1 if k.x1_is_x2 else _moments(phi, k.var2, k.var2, k.var2, False)[0]
    return replace(k, nngp=t, ntk=ntk, var1=var1, var2=var2, is_gaussian=False)


# ---------------------------------------------------------------------------
# Spatial reductions


def flatten_translate(k: KernelPair) -> KernelPair:
    """Normalized trace over the spatial diagonal; kernels become VectorOnly.

    The NNGP and NTK traces are stored separately; a following Dense layer
    adds its own NNGP term per the affine rule.
    """
    rep = k.representation
    if rep is Representation.VECTOR:
        raise RepresentationError("Flatten cannot act on a VectorOnly kernel")
    if rep is Representation.MARGINAL:
        nngp = k.nngp.mean(axis=(-2, -1))
        ntk = None if k.ntk is None else k.ntk.mean(axis=(-2, -1))
        var1 = k.var1.mean(axis=(-2, -1))
        var2 = var1 if k.x1_is_x2 else k.var2.mean(axis=(-2, -1))
    else:
        nngp = np.einsum("ijhwhw->ijhw", k.nngp).mean(axis=(-2, -1))
        ntk = (None if k.ntk is None
               else np.einsum("ijhwhw->ijhw", k.ntk).mean(axis=(-2, -1)))
        var1 = _pixel_diag(k.var1).mean(axis=(-2, -1))
        var2 = var1 if k.x1_is_x2 else _pixel_diag(k.var2).mean(axis=(-2, -1))
    return replace(k, nngp=nngp, ntk=ntk, var1=var1, var2=var2,
                   representation=Representation.VECTOR, spatial_shape=None)


def _pool_last_pair(t, geom, scale):
    padded = pad_spatial(t, geom, axes=(-2, -1))
    return _accel.conv_accumulate_marginal(
        padded, geom.filter_hw, geom.strides, geom.out_hw, scale)


def _pool_both_pairs(t, geom):
    scale = 1.0 / geom.filter_pixels
    t = _pool_last_pair(t, geom, scale)
    t = np.moveaxis(t, (-4, -3), (-2, -1))
    t = _pool_last_pair(t, geom, scale)
    return np.moveaxis(t, (-2, -1), (-4, -3))


def avgpool_translate(k: KernelPair, window, strides, padding) -> KernelPair:
    """Average pooling applied independently to both spatial-pair axes."""
    if k.representation is not Representation.FULL:
        raise RepresentationError(
            "AvgPool requires the full spatial representation (planner bug if "
            f"reached with {k.representation})")
    geom = conv_geom(k.spatial_shape, window, strides, padding)
    nngp = _pool_both_pairs(k.nngp, geom)
    ntk = None if k.ntk is None else _pool_both_pairs(k.ntk, geom)
    var1 = _pool_both_pairs(k.var1, geom)
    var2 = var1 if k.x1_is_x2 else _pool_both_pairs(k.var2, geom)
    return replace(k, nngp=nngp, ntk=ntk, var1=var1, var2=var2,
                   spatial_shape=geom.out_hw)


def globalavgpool_translate(k: KernelPair) -> KernelPair:
    """Mean over all pixel pairs; kernels become VectorOnly."""
    if k.representation is not Representation.FULL:
        raise RepresentationError(
            "GlobalAvgPool requires the full spatial representation (planner "
            f"bug if reached with {k.representation})")
    axes = (-4, -3, -2, -1)
    nngp = k.nngp.mean(axis=axes)
    ntk = None if k.ntk is None else k.ntk.mean(axis=axes)
    var1 = k.var1.mean(axis=axes)
    var2 = var1 if k.x1_is_x2 else k.var2.mean(axis=axes)
    return replace(k, nngp=nngp, ntk=ntk, var1=var1, var2=var2,
                   representation=Representation.VECTOR, spatial_shape=None)


# ---------------------------------------------------------------------------
# Structural ops


def fanout_translate(k: KernelPair, n: int) -> list[KernelPair]:
    return [k] * n


def faninsum_translate(ks: list[KernelPair]) -> KernelPair:
    first = ks[0]
    for other in ks[1:]:
        if other.representation is not first.representation:
            raise RepresentationError(
                "FanInSum branches disagree on representation: "
                f"{first.representation} vs {other.representation}")
        if other.nngp.shape != first.nngp.shape:
            raise ValueError(
                f"FanInSum branches disagree on shape: {first.nngp.shape} vs "
                f"{other.nngp.shape}")
    nngp = sum(k.nngp for k in ks)
    ntk = None if first.ntk is None else sum(k.ntk for k in ks)
    var1 = sum(k.var1 for k in ks)
    var2 = var1 if first.x1_is_x2 else sum(k.var2 for k in ks)
    return replace(first, nngp=nngp, ntk=ntk, var1=var1, var2=var2,
                   is_gaussian=all(k.is_gaussian for k in ks))


def dropout_translate(k: KernelPair, rate: float) -> KernelPair:
    """Inverted dropout: entries with matching input and pixel indices are
    scaled by 1/rate; all other covariance entries are unchanged."""
    if rate == 1.0:
        return replace(k, is_gaussian=False)
    s = 1.0 / rate
    rep = k.representation

    def scale_var(var):
        var = var.copy()
        if rep is Representation.FULL:
            n, h, w = var.shape[0], var.shape[1], var.shape[2]
            hh = np.arange(h)[None, :, None]
            ww = np.arange(w)[None, None, :]
            ii = np.arange(n)[:, None, None]
            var[ii, hh, ww, hh, ww] *= s
        else:
            var *= s
        return var

    var1 = scale_var(k.var1)
    var2 = var1 if k.x1_is_x2 else scale_var(k.var2)

    def scale_kernel(t):
        if t is None or not k.x1_is_x2:
            return t
        t = t.copy()
        n = t.shape[0]
        if rep is Representation.VECTOR:
            idx = np.arange(n)
            t[idx, idx] *= s
        elif rep is Representation.MARGINAL:
            idx = np.arange(n)
            t[idx, idx, :, :] *= s
        else:
            h, w = t.shape[2], t.shape[3]
            ii = np.arange(n)[:, None, None]
            hh = np.arange(h)[None, :, None]
            ww = np.arange(w)[None, None, :]
            t[ii, ii, hh, ww, hh, ww] *= s
        return t

    return replace(k, nngp=scale_kernel(k.nngp), ntk=scale_kernel(k.ntk),
                   var1=var1, var2=var2, is_gaussian=False)


# ---------------------------------------------------------------------------
# Whole-network propagation


def _narrow(k: KernelPair, target: Representation) -> KernelPair:
    """Drops covariance structure a cheaper representation does not carry."""
    if k.representation is target:
        return k
    if k.representation is Representation.FULL and target is Representation.MARGINAL:
        nngp = np.ascontiguousarray(np.einsum("ijhwhw->ijhw", k.nngp))
        ntk = (None if k.ntk is None
               else np.ascontiguousarray(np.einsum("ijhwhw->ijhw", k.ntk)))
        var1 = np.ascontiguousarray(_pixel_diag(k.var1))
        var2 = var1 if k.x1_is_x2 else np.ascontiguousarray(_pixel_diag(k.var2))
        return replace(k, nngp=nngp, ntk=ntk, var1=var1, var2=var2,
                       representation=Representation.MARGINAL)
    raise RepresentationError(f"cannot narrow {k.representation} to {target}")


def _apply_node(layer, path, k, plan):
    if isinstance(layer, Serial):
        return _run_serial(layer.children, path, k, plan)
    try:
        if isinstance(layer, Dense):
            out = dense_translate(k, layer.w_std, layer.b_std)
        elif isinstance(layer, Conv):
            out = conv_translate(k, layer.filter_shape, layer.strides,
                                 layer.padding, layer.w_std, layer.b_std)
        elif isinstance(layer, (ABRelu, Erf)):
            out = nonlin_translate(k, layer)
        elif isinstance(layer, Flatten):
            if k.representation is Representation.VECTOR and plan.flatten_input:
                out = k
            else:
                out = flatten_translate(k)
        elif isinstance(layer, AvgPool):
            out = avgpool_translate(k, layer.window, layer.strides, layer.padding)
        elif isinstance(layer, GlobalAvgPool):
            out = globalavgpool_translate(k)
        elif isinstance(layer, Dropout):
            out = dropout_translate(k, layer.rate)
        elif isinstance(layer, Identity):
            out = k
        else:
            raise TypeError(f"unexpected layer {type(layer).__name__}")
        tag = plan.tags.get(path)
        if tag is not None and out.representation.value > tag.value:
            out = _narrow(out, tag)
        return out
    except ValueError as e:
        loc = "/".join(str(i) for i in path) or "<root>"
        raise type(e)(f"at node {loc}: {e}") from e


def _run_serial(children, base_path, k, plan):
    i = 0
    while i < len(children):
        child = children[i]
        if isinstance(child, FanOut):
            par = children[i + 1]
            branches = fanout_translate(k, child.n)
            outs = [_apply_node(branch, base_path + (i + 1, j), branches[j], plan)
                    for j, branch in enumerate(par.children)]
            try:
                k = faninsum_translate(outs)
            except ValueError as e:
                loc = "/".join(str(p) for p in base_path + (i + 2,))
                raise type(e)(f"at node {loc}: {e}") from e
            i += 3
        else:
            k = _apply_node(child, base_path + (i,), k, plan)
            i += 1
    return k


def kernel_fn(spec: NetSpec, x1, x2=None, get: str = "both",
              force_representation: Optional[str] = None) -> KernelPair:
    """Computes the analytic NNGP and NTK of ``spec`` between two batches.

    ``x2=None`` means the symmetric case x2 = x1.  ``get`` is one of
    "nngp", "ntk" or "both"; the NNGP is always computed (it is an
    intermediate of the NTK recursion).  ``force_representation="full"``
    keeps every spatial node in the full pixel-pair representation, which is
    useful for validating the planner.
    """
    if get not in ("nngp", "ntk", "both"):
        raise ValueError(f"get must be 'nngp', 'ntk' or 'both', got {get!r}")
    errs = validate(spec)
    if errs:
        raise ValueError("invalid NetSpec:\n" + "\n".join(str(e) for e in errs))
    if force_representation not in (None, "full"):
        raise ValueError("force_representation must be None or 'full'")
    plan = plan_representation(spec, force_full=force_representation == "full")

    x1_is_x2 = x2 is None
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = x1 if x1_is_x2 else np.asarray(x2, dtype=np.float64)
    expected = spec.input_shape
    for name, x in (("x1", x1), ("x2", x2)):
        if x.shape[1:] != expected:
            raise ValueError(
                f"{name} has shape {x.shape}, expected (batch,) + {expected}")

    if plan.flatten_input or plan.input_rep is Representation.VECTOR:
        xa = x1.reshape(x1.shape[0], -1)
        xb = x2.reshape(x2.shape[0], -1)
        k = input_kernel(xa, xb, representation=Representation.VECTOR,
                         want_ntk=get != "nngp", x1_is_x2=x1_is_x2)
    else:
        k = input_kernel(x1, x2, representation=plan.input_rep,
                         want_ntk=get != "nngp", x1_is_x2=x1_is_x2)

    out = _apply_node(spec.root, (), k, plan)
    if out.representation is not Representation.VECTOR:
        raise RepresentationError(
            "network output kernel is not VectorOnly; the spec must collapse "
            "spatial axes before the output")
    return out
