"""Finite-width realization of a NetSpec.

Parameters are stored as standard normal draws; the sigma_w / sqrt(fan_in)
and sigma_b scalings are applied in the forward pass (NTK parameterization).
Provides exact reverse-mode parameter gradients, forward-mode truncated
Taylor (jet) propagation, and a small full-batch trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import erf as _erf

from .geometry import conv_geom, extract_patches, scatter_patches
from .netspec import (ABRelu, AvgPool, Conv, Dense, Dropout, Erf, FanInSum,
                      FanOut, Flatten, GlobalAvgPool, Identity, NetSpec,
                      Parallel, Serial, validate)

__all__ = [
    "init_params", "apply", "apply_with_tape", "grad_params", "jet_apply",
    "grad_params_jet", "train", "Sgd", "Momentum", "TrainResult",
    "DivergenceError", "tree_map", "tree_map2", "tree_leaves", "tree_dot",
    "tree_add", "tree_sub", "tree_scale", "tree_zeros_like", "tree_randn_like",
]

_INV_SQRT_PI2 = 2.0 / math.sqrt(math.pi)


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Parameter trees: dicts for affine layers, lists for combinators, else None.


def tree_map(f, tree):
    if tree is None:
        return None
    if isinstance(tree, dict):
        return {k: f(v) for k, v in tree.items()}
    return [tree_map(f, t) for t in tree]


def tree_map2(f, t1, t2):
    if t1 is None:
        return None
    if isinstance(t1, dict):
        return {k: f(t1[k], t2[k]) for k in t1}
    return [tree_map2(f, a, b) for a, b in zip(t1, t2)]


def tree_leaves(tree):
    if tree is None:
        return
    elif isinstance(tree, dict):
        for k in sorted(tree):
            yield tree[k]
    else:
        for t in tree:
            yield from tree_leaves(t)


def tree_dot(t1, t2) -> float:
    return sum(float(np.vdot(a, b)) for a, b in zip(tree_leaves(t1), tree_leaves(t2)))


def tree_add(t1, t2):
    return tree_map2(np.add, t1, t2)


def tree_sub(t1, t2):
    return tree_map2(np.subtract, t1, t2)


def tree_scale(tree, c):
    return tree_map(lambda a: c * a, tree)


def tree_zeros_like(tree):
    return tree_map(np.zeros_like, tree)


def tree_randn_like(tree, rng):
    return tree_map(lambda a: rng.standard_normal(a.shape), tree)


# ---------------------------------------------------------------------------
# Shapes and initialization


def _shape_after(layer, shape):
    """Signal shape propagation, mirroring netspec._infer_shape for valid specs."""
    if isinstance(layer, Dense):
        return shape[:-1] + (layer.width,)
    if isinstance(layer, Conv):
        geom = conv_geom(shape[1:3], layer.filter_shape, layer.strides, layer.padding)
        return (shape[0],) + geom.out_hw + (layer.channels,)
    if isinstance(layer, AvgPool):
        geom = conv_geom(shape[1:3], layer.window, layer.strides, layer.padding)
        return (shape[0],) + geom.out_hw + (shape[3],)
    if isinstance(layer, GlobalAvgPool):
        return (shape[0], shape[3])
    if isinstance(layer, Flatten):
        if len(shape) == 2:
            return shape
        return (shape[0], shape[1] * shape[2] * shape[3])
    return shape


def init_params(spec: NetSpec, seed):
    """Draws a parameter tree of i.i.d. standard normal entries.

    ``seed`` is an int or ``np.random.SeedSequence``.  Each parametric layer
    gets its own counter-based stream (Philox) split off the root seed, so
    draws are reproducible and independent of evaluation order.
    """
    errs = validate(spec)
    if errs:
        raise ValueError("invalid NetSpec:\n" + "\n".join(str(e) for e in errs))
    if isinstance(seed, np.random.SeedSequence):
        # Clone so repeated calls with the same SeedSequence are identical
        # (spawning advances the parent's child counter in place).
        ss = np.random.SeedSequence(entropy=seed.entropy, spawn_key=seed.spawn_key)
    else:
        ss = np.random.SeedSequence(seed)

    def fresh_rng():
        # Successive spawn(1) calls yield distinct, order-stable children.
        return np.random.Generator(np.random.Philox(ss.spawn(1)[0]))

    def walk(layer, shape):
        if isinstance(layer, Serial):
            out = []
            i = 0
            while i < len(layer.children):
                child = layer.children[i]
                if isinstance(child, FanOut):
                    par = layer.children[i + 1]
                    branch_params, branch_shapes = [], []
                    for branch in par.children:
                        p, s = walk(branch, shape)
                        branch_params.append(p)
                        branch_shapes.append(s)
                    out.extend([None, branch_params, None])
                    shape = branch_shapes[0]
                    i += 3
                else:
                    p, shape = walk(child, shape)
                    out.append(p)
                    i += 1
            return out, shape
        if isinstance(layer, Dense):
            rng = fresh_rng()
            p = {"w": rng.standard_normal((shape[-1], layer.width)),
                 "b": rng.standard_normal((layer.width,))}
            return p, _shape_after(layer, shape)
        if isinstance(layer, Conv):
            rng = fresh_rng()
            p = {"w": rng.standard_normal(layer.filter_shape + (shape[3], layer.channels)),
                 "b": rng.standard_normal((layer.channels,))}
            return p, _shape_after(layer, shape)
        return None, _shape_after(layer, shape)

    in_shape = ((-1, spec.input_shape[0]) if len(spec.input_shape) == 1
                else (-1,) + spec.input_shape)
    params, _ = walk(spec.root, in_shape)
    return params


# ---------------------------------------------------------------------------
# Forward pass with tape


def _dense_scale(layer, n_in):
    return layer.w_std / math.sqrt(n_in)


def _forward(layer, params, x, tape):
    """Returns layer output; if tape is a list, appends what backward needs."""
    if isinstance(layer, Serial):
        sub_tape = [] if tape is not None else None
        i = 0
        while i < len(layer.children):
            child = layer.children[i]
            if isinstance(child, FanOut):
                par = layer.children[i + 1]
                outs, branch_tapes = [], []
                for j, branch in enumerate(par.children):
                    bt = [] if tape is not None else None
                    outs.append(_forward(branch, params[i + 1][j], x, bt))
                    branch_tapes.append(bt)
                x = outs[0]
                for o in outs[1:]:
                    x = x + o
                if tape is not None:
                    sub_tape.append(("group", branch_tapes))
                i += 3
            else:
                x = _forward(child, params[i], x, sub_tape)
                i += 1
        if tape is not None:
            tape.append(("serial", sub_tape))
        return x

    if isinstance(layer, Dense):
        s = _dense_scale(layer, x.shape[-1])
        y = s * (x @ params["w"]) + layer.b_std * params["b"]
        if tape is not None:
            tape.append(("dense", x, s))
        return y
    if isinstance(layer, Conv):
        geom = conv_geom(x.shape[1:3], layer.filter_shape, layer.strides, layer.padding)
        patches = extract_patches(x, geom)
        k = patches.shape[-1]
        s = layer.w_std / math.sqrt(k)
        w = params["w"].reshape(k, layer.channels)
        y = s * (patches @ w) + layer.b_std * params["b"]
        if tape is not None:
            tape.append(("conv", patches, s, geom, x.shape))
        return y
    if isinstance(layer, ABRelu):
        y = np.where(x > 0, layer.b * x, layer.a * x)
        if tape is not None:
            tape.append(("abrelu", np.where(x > 0, layer.b, layer.a)))
        return y
    if isinstance(layer, Erf):
        y = _erf(x)
        if tape is not None:
            tape.append(("erf", x, _INV_SQRT_PI2 * np.exp(-x * x)))
        return y
    if isinstance(layer, Flatten):
        if tape is not None:
            tape.append(("flatten", x.shape))
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, AvgPool):
        geom = conv_geom(x.shape[1:3], layer.window, layer.strides, layer.padding)
        patches = extract_patches(x, geom)
        n, oh, ow, _ = patches.shape
        c = x.shape[3]
        y = patches.reshape(n, oh, ow, geom.filter_pixels, c).mean(axis=3)
        if tape is not None:
            tape.append(("avgpool", geom, x.shape))
        return y
    if isinstance(layer, GlobalAvgPool):
        if tape is not None:
            tape.append(("gap", x.shape))
        return x.mean(axis=(1, 2))
    if isinstance(layer, (Dropout, Identity)):
        if tape is not None:
            tape.append(("identity",))
        return x
    raise TypeError(f"unexpected layer {type(layer).__name__}")


def apply(spec: NetSpec, params, x) -> np.ndarray:
    """Forward pass of the finite network (dropout is identity at evaluation)."""
    x = _check_input(spec, x)
    return _forward(spec.root, params, x, None)


def apply_with_tape(spec: NetSpec, params, x):
    x = _check_input(spec, x)
    tape: list = []
    y = _forward(spec.root, params, x, tape)
    return y, tape[0] if len(tape) == 1 else tape


def _check_input(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"input shape {x.shape} does not match (batch,) + "
                         f"{spec.input_shape}")
    return x


# ---------------------------------------------------------------------------
# Reverse mode


def _backward(layer, params, entry, delta, grads, collector=None, grad_out=None):
    """Appends this layer's parameter gradient to `grads` (execution order)
    and returns the cotangent with respect to the layer input.

    When ``collector`` is a list, parameter gradients are skipped and
    (layer, tape_entry, delta) triples for affine layers are appended
    instead (used for empirical NTK contraction).  When ``grad_out`` is a
    parameter-shaped tree, gradients are written into its buffers (the
    training loop reuses them across steps to avoid large allocations)."""
    kind = entry[0]
    if kind == "serial":
        sub_entries = entry[1]
        sub_grads: list = [None] * len(sub_entries)
        children = layer.children
        # Walk children in reverse, pairing tape entries with source nodes.
        idxs = []
        i = 0
        while i < len(children):
            if isinstance(children[i], FanOut):
                idxs.append(("group", i))
                i += 3
            else:
                idxs.append(("plain", i))
                i += 1
        for t in range(len(idxs) - 1, -1, -1):
            tag, i = idxs[t]
            e = sub_entries[t]
            if tag == "group":
                par = children[i + 1]
                branch_grads = []
                dsum = None
                for j, branch in enumerate(par.children):
                    g: list = []
                    d = _backward(branch, params[i + 1][j], e[1][j][0],
                                  delta, g, collector,
                                  None if grad_out is None else grad_out[i + 1][j])
                    branch_grads.append(g[0] if len(g) == 1 else g)
                    dsum = d if dsum is None else dsum + d
                sub_grads[t] = branch_grads
                delta = dsum
            else:
                g = []
                delta = _backward(children[i], params[i], e, delta, g, collector,
                                  None if grad_out is None else grad_out[i])
                sub_grads[t] = g[0] if len(g) == 1 else g
        # Re-expand to one slot per child (None for FanOut / FanInSum slots).
        expanded: list = []
        for t, (tag, i) in enumerate(idxs):
            if tag == "group":
                expanded.extend([None, sub_grads[t], None])
            else:
                expanded.append(sub_grads[t])
        grads.append(expanded)
        return delta

    if kind == "dense":
        _, x, s = entry
        w = params["w"]
        if collector is not None:
            collector.append((layer, entry, delta))
            grads.append(None)
        else:
            d2 = delta.reshape(-1, delta.shape[-1])
            x2 = x.reshape(-1, x.shape[-1])
            if grad_out is not None:
                np.matmul(x2.T, s * d2, out=grad_out["w"])
                np.sum(d2, axis=0, out=grad_out["b"])
                grad_out["b"] *= layer.b_std
                grads.append(grad_out)
            else:
                grads.append({"w": s * (x2.T @ d2),
                              "b": layer.b_std * d2.sum(axis=0)})
        return s * (delta @ w.T)
    if kind == "conv":
        _, patches, s, geom, in_shape = entry
        k = patches.shape[-1]
        w = params["w"].reshape(k, layer.channels)
        dflat = delta.reshape(-1, layer.channels)
        if collector is not None:
            collector.append((layer, entry, delta))
            grads.append(None)
        else:
            pflat = patches.reshape(-1, k)
            if grad_out is not None:
                np.matmul(pflat.T, s * dflat,
                          out=grad_out["w"].reshape(k, layer.channels))
                np.sum(dflat, axis=0, out=grad_out["b"])
                grad_out["b"] *= layer.b_std
                grads.append(grad_out)
            else:
                grads.append({"w": (s * (pflat.T @ dflat)).reshape(params["w"].shape),
                              "b": layer.b_std * dflat.sum(axis=0)})
        dpatches = s * (dflat @ w.T)
        return scatter_patches(
            dpatches.reshape(patches.shape), geom, in_shape)
    if kind == "abrelu":
        grads.append(None)
        return entry[1] * delta
    if kind == "erf":
        grads.append(None)
        return entry[2] * delta
    if kind == "flatten":
        grads.append(None)
        return delta.reshape(entry[1])
    if kind == "avgpool":
        _, geom, in_shape = entry
        grads.append(None)
        n, oh, ow, c = delta.shape
        dpatches = np.broadcast_to(
            delta[:, :, :, None, :] / geom.filter_pixels,
            (n, oh, ow, geom.filter_pixels, c)).reshape(n, oh, ow, -1)
        return scatter_patches(dpatches, geom, in_shape)
    if kind == "gap":
        _, in_shape = entry
        grads.append(None)
        n, h, w, c = in_shape
        return np.broadcast_to(delta[:, None, None, :] / (h * w), in_shape)
    if kind == "identity":
        grads.append(None)
        return delta
    raise TypeError(f"unexpected tape entry {kind}")


def grad_params(spec: NetSpec, params, x, cotangent):
    """Exact gradient of <cotangent, apply(params, x)> w.r.t. every parameter."""
    y, tape = apply_with_tape(spec, params, x)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != y.shape:
        raise ValueError(f"cotangent shape {cotangent.shape} != output {y.shape}")
    grads: list = []
    _backward(spec.root, params, tape, cotangent, grads)
    return grads[0] if isinstance(spec.root, Serial) else grads[0]


# ---------------------------------------------------------------------------
# Forward-mode jets (truncated Taylor coefficients along a parameter direction)


def jet_apply(spec: NetSpec, params, direction, x, order: int):
    """Taylor coefficients of t -> apply(params + t * direction, x) at t = 0.

    Returns ``order + 1`` arrays (f0, ..., fk); fk is the coefficient of
    t**k (the k-th derivative divided by k!).  Orders above 2 are not
    supported.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"jet order must be 0, 1 or 2, got {order}")
    x = _check_input(spec, x)
    xs = [x] + [np.zeros_like(x) for _ in range(order)]
    ys = _jet_forward(spec.root, params, direction, xs, None)
    return tuple(ys)


def _jet_forward(layer, params, direction, xs, tape):
    if isinstance(layer, Serial):
        sub_tape = [] if tape is not None else None
        i = 0
        while i < len(layer.children):
            child = layer.children[i]
            if isinstance(child, FanOut):
                par = layer.children[i + 1]
                branch_outs, branch_tapes = [], []
                for j, branch in enumerate(par.children):
                    bt = [] if tape is not None else None
                    branch_outs.append(
                        _jet_forward(branch, params[i + 1][j],
                                     direction[i + 1][j], xs, bt))
                    branch_tapes.append(bt)
                xs = [sum(o[c] for o in branch_outs) for c in range(len(xs))]
                if tape is not None:
                    sub_tape.append(("group", branch_tapes))
                i += 3
            else:
                xs = _jet_forward(child, params[i], direction[i], xs, sub_tape)
                i += 1
        if tape is not None:
            tape.append(("serial", sub_tape))
        return xs

    k = len(xs) - 1
    if isinstance(layer, Dense):
        s = _dense_scale(layer, xs[0].shape[-1])
        w0, dw = params["w"], direction["w"]
        ys = [s * (xs[0] @ w0) + layer.b_std * params["b"]]
        if k >= 1:
            ys.append(s * (xs[1] @ w0 + xs[0] @ dw) + layer.b_std * direction["b"])
        if k >= 2:
            ys.append(s * (xs[2] @ w0 + xs[1] @ dw))
        if tape is not None:
            tape.append(("dense", xs, s))
        return ys
    if isinstance(layer, Conv):
        geom = conv_geom(xs[0].shape[1:3], layer.filter_shape, layer.strides,
                         layer.padding)
        pats = [extract_patches(c, geom) for c in xs]
        kk = pats[0].shape[-1]
        s = layer.w_std / math.sqrt(kk)
        w0 = params["w"].reshape(kk, layer.channels)
        dw = direction["w"].reshape(kk, layer.channels)
        ys = [s * (pats[0] @ w0) + layer.b_std * params["b"]]
        if k >= 1:
            ys.append(s * (pats[1] @ w0 + pats[0] @ dw) + layer.b_std * direction["b"])
        if k >= 2:
            ys.append(s * (pats[2] @ w0 + pats[1] @ dw))
        if tape is not None:
            tape.append(("conv", pats, s, geom, xs[0].shape))
        return ys
    if isinstance(layer, ABRelu):
        d1 = np.where(xs[0] > 0, layer.b, layer.a)
        ys = [np.where(xs[0] > 0, layer.b * xs[0], layer.a * xs[0])]
        if k >= 1:
            ys.append(d1 * xs[1])
        if k >= 2:
            # Second distributional derivative is 0 almost everywhere.
            ys.append(d1 * xs[2])
        if tape is not None:
            tape.append(("abrelu_jet", d1))
        return ys
    if isinstance(layer, Erf):
        p1 = _INV_SQRT_PI2 * np.exp(-xs[0] * xs[0])
        ys = [_erf(xs[0])]
        if k >= 1:
            ys.append(p1 * xs[1])
        if k >= 2:
            p2 = -2.0 * xs[0] * p1
            ys.append(p1 * xs[2] + 0.5 * p2 * xs[1] * xs[1])
        if tape is not None:
            tape.append(("erf_jet", xs, p1))
        return ys
    # Linear structural layers act coefficientwise.
    if isinstance(layer, Flatten):
        if tape is not None:
            tape.append(("flatten", xs[0].shape))
        return [c.reshape(c.shape[0], -1) for c in xs]
    if isinstance(layer, AvgPool):
        geom = conv_geom(xs[0].shape[1:3], layer.window, layer.strides, layer.padding)

        def pool(c):
            p = extract_patches(c, geom)
            n, oh, ow, _ = p.shape
            return p.reshape(n, oh, ow, geom.filter_pixels, c.shape[3]).mean(axis=3)
        if tape is not None:
            tape.append(("avgpool", geom, xs[0].shape))
        return [pool(c) for c in xs]
    if isinstance(layer, GlobalAvgPool):
        if tape is not None:
            tape.append(("gap", xs[0].shape))
        return [c.mean(axis=(1, 2)) for c in xs]
    if isinstance(layer, (Dropout, Identity)):
        if tape is not None:
            tape.append(("identity",))
        return xs
    raise TypeError(f"unexpected layer {type(layer).__name__}")


def grad_params_jet(spec: NetSpec, params, direction, x, cotangent):
    """Gradient and its directional derivative along ``direction``.

    Returns (g0, g1) where g0 = grad_params(params, x, cotangent) and
    g1 = d/dt grad_params(params + t * direction, x, cotangent) at t = 0.
    Used to train quadratic Taylor models without a full Hessian.
    """
    x = _check_input(spec, x)
    xs = [x, np.zeros_like(x)]
    tape: list = []
    ys = _jet_forward(spec.root, params, direction, xs, tape)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != ys[0].shape:
        raise ValueError(f"cotangent shape {cot.shape} != output {ys[0].shape}")
    grads0: list = []
    grads1: list = []
    _jet_backward(spec.root, params, direction,
                  tape[0] if len(tape) == 1 else tape,
                  cot, np.zeros_like(cot), grads0, grads1)
    return grads0[0], grads1[0]


def _jet_backward(layer, params, direction, entry, d0, d1, grads0, grads1):
    kind = entry[0]
    if kind == "serial":
        sub_entries = entry[1]
        children = layer.children
        idxs = []
        i = 0
        while i < len(children):
            if isinstance(children[i], FanOut):
                idxs.append(("group", i))
                i += 3
            else:
                idxs.append(("plain", i))
                i += 1
        sub_g0: list = [None] * len(idxs)
        sub_g1: list = [None] * len(idxs)
        for t in range(len(idxs) - 1, -1, -1):
            tag, i = idxs[t]
            e = sub_entries[t]
            if tag == "group":
                par = children[i + 1]
                bg0, bg1 = [], []
                s0 = s1 = None
                for j, branch in enumerate(par.children):
                    g0l: list = []
                    g1l: list = []
                    bt = e[1][j]
                    r0, r1 = _jet_backward(branch, params[i + 1][j],
                                           direction[i + 1][j],
                                           bt[0] if len(bt) == 1 else bt,
                                           d0, d1, g0l, g1l)
                    bg0.append(g0l[0] if len(g0l) == 1 else g0l)
                    bg1.append(g1l[0] if len(g1l) == 1 else g1l)
                    s0 = r0 if s0 is None else s0 + r0
                    s1 = r1 if s1 is None else s1 + r1
                sub_g0[t], sub_g1[t] = bg0, bg1
                d0, d1 = s0, s1
            else:
                g0l, g1l = [], []
                d0, d1 = _jet_backward(children[i], params[i], direction[i],
                                       e, d0, d1, g0l, g1l)
                sub_g0[t] = g0l[0] if len(g0l) == 1 else g0l
                sub_g1[t] = g1l[0] if len(g1l) == 1 else g1l
        exp0: list = []
        exp1: list = []
        for t, (tag, i) in enumerate(idxs):
            if tag == "group":
                exp0.extend([None, sub_g0[t], None])
                exp1.extend([None, sub_g1[t], None])
            else:
                exp0.append(sub_g0[t])
                exp1.append(sub_g1[t])
        grads0.append(exp0)
        grads1.append(exp1)
        return d0, d1

    if kind == "dense":
        _, xs, s = entry
        w0, dw = params["w"], direction["w"]
        axes = (tuple(range(xs[0].ndim - 1)), tuple(range(d0.ndim - 1)))
        g0w = s * np.tensordot(xs[0], d0, axes=axes)
        g1w = s * (np.tensordot(xs[1], d0, axes=axes)
                   + np.tensordot(xs[0], d1, axes=axes))
        g0b = layer.b_std * d0.reshape(-1, d0.shape[-1]).sum(axis=0)
        g1b = layer.b_std * d1.reshape(-1, d1.shape[-1]).sum(axis=0)
        grads0.append({"w": g0w, "b": g0b})
        grads1.append({"w": g1w, "b": g1b})
        return s * (d0 @ w0.T), s * (d1 @ w0.T + d0 @ dw.T)
    if kind == "conv":
        _, pats, s, geom, in_shape = entry
        kk = pats[0].shape[-1]
        co = d0.shape[-1]
        w0 = params["w"].reshape(kk, co)
        dw = direction["w"].reshape(kk, co)
        p0 = pats[0].reshape(-1, kk)
        p1 = pats[1].reshape(-1, kk)
        f0 = d0.reshape(-1, co)
        f1 = d1.reshape(-1, co)
        g0w = s * (p0.T @ f0)
        g1w = s * (p1.T @ f0 + p0.T @ f1)
        grads0.append({"w": g0w.reshape(params["w"].shape),
                       "b": layer.b_std * f0.sum(axis=0)})
        grads1.append({"w": g1w.reshape(params["w"].shape),
                       "b": layer.b_std * f1.sum(axis=0)})
        dp0 = (s * (f0 @ w0.T)).reshape(pats[0].shape)
        dp1 = (s * (f1 @ w0.T + f0 @ dw.T)).reshape(pats[0].shape)
        return (scatter_patches(dp0, geom, in_shape),
                scatter_patches(dp1, geom, in_shape))
    if kind == "abrelu_jet":
        d = entry[1]
        grads0.append(None)
        grads1.append(None)
        return d * d0, d * d1
    if kind == "erf_jet":
        _, xs, p1 = entry
        p2 = -2.0 * xs[0] * p1
        grads0.append(None)
        grads1.append(None)
        return p1 * d0, p1 * d1 + p2 * xs[1] * d0
    if kind == "flatten":
        grads0.append(None)
        grads1.append(None)
        return d0.reshape(entry[1]), d1.reshape(entry[1])
    if kind == "avgpool":
        _, geom, in_shape = entry
        grads0.append(None)
        grads1.append(None)

        def back(d):
            n, oh, ow, c = d.shape
            dp = np.broadcast_to(d[:, :, :, None, :] / geom.filter_pixels,
                                 (n, oh, ow, geom.filter_pixels, c)).reshape(n, oh, ow, -1)
            return scatter_patches(dp, geom, in_shape)
        return back(d0), back(d1)
    if kind == "gap":
        _, in_shape = entry
        grads0.append(None)
        grads1.append(None)
        n, h, w, c = in_shape

        def back(d):
            return np.broadcast_to(d[:, None, None, :] / (h * w), in_shape)
        return back(d0), back(d1)
    if kind == "identity":
        grads0.append(None)
        grads1.append(None)
        return d0, d1
    raise TypeError(f"unexpected tape entry {kind}")


# ---------------------------------------------------------------------------
# Training


def _inplace_step(params, grads, lr):
    # Consumes `grads` as scratch to avoid temporaries.
    if params is None:
        return
    if isinstance(params, dict):
        for k in params:
            g = grads[k]
            g *= lr
            params[k] -= g
        return
    for p, g in zip(params, grads):
        _inplace_step(p, g, lr)


def _momentum_step(params, velocity, grads, lr, gamma):
    # v <- gamma v + g; p <- p - lr v.  Consumes `grads` as scratch.
    if params is None:
        return
    if isinstance(params, dict):
        for k in params:
            v = velocity[k]
            v *= gamma
            v += grads[k]
            np.multiply(v, lr, out=grads[k])
            params[k] -= grads[k]
        return
    for p, v, g in zip(params, velocity, grads):
        _momentum_step(p, v, g, lr, gamma)


@dataclass(frozen=True)
class Sgd:
    lr: float


@dataclass(frozen=True)
class Momentum:
    lr: float
    gamma: float = 0.9


@dataclass
class TrainResult:
    params: object
    train_losses: np.ndarray          # recorded at steps 0..steps
    test_losses: Optional[np.ndarray]
    recorded_steps: Optional[np.ndarray] = None
    train_predictions: Optional[np.ndarray] = None
    test_predictions: Optional[np.ndarray] = None


def train(spec: NetSpec, params, x_train, y_train, optimizer, steps: int,
          x_test=None, y_test=None, loss: str = "mse",
          apply_fn: Optional[Callable] = None,
          grad_fn: Optional[Callable] = None,
          record_every: int = 0) -> TrainResult:
    """Full-batch gradient descent on an MSE objective.

    The parameter update uses the gradient of 0.5 * sum((f - y)^2), so a
    trajectory of ``steps`` steps at learning rate ``lr`` corresponds to the
    continuous-time kernel dynamics exp(-lr * Theta * steps).  The recorded
    losses are mean squared errors (mean over points and outputs).
    """
    if loss != "mse":
        raise ValueError("only the mse loss is supported")
    if not isinstance(optimizer, (Sgd, Momentum)):
        raise TypeError(f"unknown optimizer {optimizer!r}")
    fused = apply_fn is None and grad_fn is None
    if apply_fn is None:
        apply_fn = lambda p, x: apply(spec, p, x)
    y_train = np.asarray(y_train, dtype=np.float64)

    # The loop owns a private copy of the tree and updates it in place;
    # gradient buffers are allocated once and reused across steps.
    params = tree_map(np.copy, params)
    grad_buffers = tree_zeros_like(params) if fused else None
    velocity = None
    train_losses = np.empty(steps + 1)
    test_losses = np.empty(steps + 1) if x_test is not None else None
    rec_steps, rec_train, rec_test = [], [], []

    for step in range(steps + 1):
        if fused:
            f, tape = apply_with_tape(spec, params, x_train)
        else:
            f = apply_fn(params, x_train)
        resid = f - y_train
        train_losses[step] = np.mean(resid * resid)
        if x_test is not None:
            f_test = apply_fn(params, x_test)
            if y_test is not None:
                r = f_test - np.asarray(y_test, dtype=np.float64)
                test_losses[step] = np.mean(r * r)
        if record_every and (step % record_every == 0 or step == steps):
            rec_steps.append(step)
            rec_train.append(f.copy())
            if x_test is not None:
                rec_test.append(f_test.copy())
        if train_losses[step] > 1e10 or not np.isfinite(train_losses[step]):
            raise DivergenceError(
                f"training diverged at step {step}: loss {train_losses[step]:.3e}")
        if step == steps:
            break
        if fused:
            g: list = []
            _backward(spec.root, params, tape, resid, g, grad_out=grad_buffers)
            g = g[0]
        else:
            g = grad_fn(params, x_train, resid)
        if isinstance(optimizer, Sgd):
            _inplace_step(params, g, optimizer.lr)
        else:
            if velocity is None:
                velocity = tree_zeros_like(g)
            _momentum_step(params, velocity, g, optimizer.lr, optimizer.gamma)

    return TrainResult(
        params=params,
        train_losses=train_losses,
        test_losses=test_losses,
        recorded_steps=np.asarray(rec_steps) if record_every else None,
        train_predictions=np.asarray(rec_train) if record_every else None,
        test_predictions=np.asarray(rec_test) if record_every and x_test is not None else None,
    )
