"""Monte Carlo kernel estimation from finite networks.

NNGP estimates average penultimate-activation Gram matrices over random
parameter draws; NTK estimates average the exact Jacobian Gram matrix of a
scalar-readout copy of the network.  Also provides weight-space linearize /
taylor_expand transforms built on the jet machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import finite_net as fnet
from .netspec import Dense, NetSpec, Serial, validate

__all__ = [
    "MCEstimate", "empirical_ntk", "monte_carlo_kernel_fn",
    "linearize", "taylor_expand", "taylor_grad_fn",
]


@dataclass
class MCEstimate:
    """Monte Carlo kernel estimate with entrywise standard errors.

    Standard errors are zero when ``n_samples == 1`` (a single draw carries
    no variance information).
    """

    nngp: Optional[np.ndarray]
    ntk: Optional[np.ndarray]
    nngp_std_err: Optional[np.ndarray]
    ntk_std_err: Optional[np.ndarray]
    n_samples: int
    width: int


# ---------------------------------------------------------------------------
# Exact empirical NTK


def empirical_ntk(spec: NetSpec, params, x1, x2=None) -> np.ndarray:
    """Theta[i, j] = <grad_theta f(x1_i), grad_theta f(x2_j)> for a scalar
    network output, summed over all parameters.

    The inner products are accumulated layer by layer from activation and
    cotangent Gram matrices, which avoids materializing per-input gradient
    trees; the result is exactly the Jacobian Gram matrix.
    """
    y1, tape1 = fnet.apply_with_tape(spec, params, x1)
    if y1.ndim != 2 or y1.shape[-1] != 1:
        raise ValueError(
            f"empirical_ntk requires a scalar network output, got {y1.shape}; "
            "loop over logits for multi-output networks")
    col1: list = []
    fnet._backward(spec.root, params, tape1, np.ones_like(y1), [], col1)
    if x2 is None:
        col2 = col1
    else:
        y2, tape2 = fnet.apply_with_tape(spec, params, x2)
        col2 = []
        fnet._backward(spec.root, params, tape2, np.ones_like(y2), [], col2)

    n1 = y1.shape[0]
    n2 = n1 if x2 is None else np.asarray(x2).shape[0]
    theta = np.zeros((n1, n2))
    for (layer1, e1, d1), (_, e2, d2) in zip(col1, col2):
        theta += _layer_ntk_block(layer1, e1, d1, e2, d2)
    return theta


def _layer_ntk_block(layer, e1, d1, e2, d2):
    if e1[0] == "dense":
        a1, s = e1[1], e1[2]
        a2 = e2[1]
    else:  # conv: the "activation" is the patch tensor
        a1, s = e1[1], e1[2]
        a2 = e2[1]
    c = a1.shape[-1]
    m = d1.shape[-1]
    a1 = a1.reshape(a1.shape[0], -1, c)
    a2 = a2.reshape(a2.shape[0], -1, c)
    d1 = d1.reshape(d1.shape[0], -1, m)
    d2 = d2.reshape(d2.shape[0], -1, m)
    n1, p = a1.shape[0], a1.shape[1]
    n2 = a2.shape[0]
    gram_a = (a1.reshape(n1 * p, c) @ a2.reshape(n2 * p, c).T)
    gram_d = (d1.reshape(n1 * p, m) @ d2.reshape(n2 * p, m).T)
    block = (s * s) * np.einsum(
        "ipjq,ipjq->ij",
        gram_a.reshape(n1, p, n2, p), gram_d.reshape(n1, p, n2, p))
    sb1 = d1.sum(axis=1)
    sb2 = d2.sum(axis=1)
    block += (layer.b_std ** 2) * (sb1 @ sb2.T)
    return block


# ---------------------------------------------------------------------------
# Monte Carlo estimator


class _Welford:
    """Streaming mean and M2; memory independent of the sample count."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, x):
        self.n += 1
        if self.mean is None:
            self.mean = np.array(x, dtype=np.float64)
            self.m2 = np.zeros_like(self.mean)
            return
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def std_err(self):
        if self.n < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.n * (self.n - 1)))


def _split_readout(spec: NetSpec):
    if not isinstance(spec.root, Serial) or not spec.root.children:
        raise ValueError("monte_carlo_kernel_fn requires a Serial spec ending in Dense")
    readout = spec.root.children[-1]
    if not isinstance(readout, Dense):
        raise ValueError(
            "monte_carlo_kernel_fn requires a Dense readout (penultimate-layer "
            f"NNGP convention); final layer is {type(readout).__name__}")
    body = Serial(spec.root.children[:-1])
    scalar = NetSpec(Serial(spec.root.children[:-1] + (
        Dense(1, readout.w_std, readout.b_std),)), spec.input_shape)
    penult = NetSpec(body, spec.input_shape)
    return penult, scalar, readout


def monte_carlo_samples(spec: NetSpec, seed, n_samples: int, x1, x2=None,
                        get: str = "both"):
    """Yields per-draw kernel samples (nngp_k, ntk_k, penult_width).

    The NNGP sample is the readout-transformed Gram matrix of penultimate
    activations (normalized by their width); the NTK sample is the exact
    empirical NTK of a width-1-readout copy (all logits of the real readout
    are i.i.d. given the input, and widths do not change the infinite-width
    kernel).  Draws are deterministic given ``seed``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if get not in ("nngp", "ntk", "both"):
        raise ValueError(f"get must be 'nngp', 'ntk' or 'both', got {get!r}")
    errs = validate(spec)
    if errs:
        raise ValueError("invalid NetSpec:\n" + "\n".join(str(e) for e in errs))
    penult, scalar, readout = _split_readout(spec)
    w2 = readout.w_std ** 2
    b2 = readout.b_std ** 2
    root_seed = (seed if isinstance(seed, np.random.SeedSequence)
                 else np.random.SeedSequence(seed))
    for child in root_seed.spawn(n_samples):
        params = fnet.init_params(scalar, child)
        nngp_k = ntk_k = None
        width = 0
        if get != "ntk":
            y1 = fnet.apply(penult, params[:-1], x1)
            y2 = y1 if x2 is None else fnet.apply(penult, params[:-1], x2)
            width = y1.shape[-1]
            nngp_k = w2 * (y1 @ y2.T) / width + b2
        if get != "nngp":
            ntk_k = empirical_ntk(scalar, params, x1, x2)
        yield nngp_k, ntk_k, width


def monte_carlo_kernel_fn(spec: NetSpec, seed, n_samples: int,
                          get: str = "both") -> Callable:
    """Builds a pure estimator of the analytic kernels by network sampling:
    ``estimator(x1, x2=None) -> MCEstimate`` with streaming mean and
    standard-error accumulation (memory independent of n_samples).
    """
    # Fixed per-sample seeds: estimator calls (and batched blocks) reuse the
    # same parameter draws, which makes the estimator a pure function.
    root_seed = (seed if isinstance(seed, np.random.SeedSequence)
                 else np.random.SeedSequence(seed))
    frozen = np.random.SeedSequence(entropy=root_seed.entropy,
                                    spawn_key=root_seed.spawn_key)

    def estimator(x1, x2=None) -> MCEstimate:
        acc_nngp = _Welford() if get != "ntk" else None
        acc_ntk = _Welford() if get != "nngp" else None
        width = 0
        fresh = np.random.SeedSequence(entropy=frozen.entropy,
                                       spawn_key=frozen.spawn_key)
        for nngp_k, ntk_k, w in monte_carlo_samples(spec, fresh, n_samples,
                                                    x1, x2, get):
            width = max(width, w)
            if acc_nngp is not None:
                acc_nngp.update(nngp_k)
            if acc_ntk is not None:
                acc_ntk.update(ntk_k)
        return MCEstimate(
            nngp=None if acc_nngp is None else acc_nngp.mean,
            ntk=None if acc_ntk is None else acc_ntk.mean,
            nngp_std_err=None if acc_nngp is None else acc_nngp.std_err(),
            ntk_std_err=None if acc_ntk is None else acc_ntk.std_err(),
            n_samples=n_samples,
            width=width,
        )

    return estimator


# ---------------------------------------------------------------------------
# Weight-space function transforms


def taylor_expand(spec: NetSpec, params0, order: int) -> Callable:
    """Returns fn(params, x): the order-``order`` Taylor polynomial of the
    network about ``params0``, evaluated at ``params``.

    Exact at params = params0 for every order; exact everywhere for linear
    models at order >= 1.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")

    def fn(params, x):
        if order == 0:
            return fnet.apply(spec, params0, x)
        direction = fnet.tree_sub(params, params0)
        jets = fnet.jet_apply(spec, params0, direction, x, order)
        out = jets[0]
        for j in jets[1:]:
            out = out + j
        return out

    return fn


def linearize(spec: NetSpec, params0) -> Callable:
    return taylor_expand(spec, params0, 1)


def taylor_grad_fn(spec: NetSpec, params0, order: int) -> Callable:
    """Gradient (w.r.t. params) of the Taylor approximant, for training it.

    Order 0 is constant in params; order 1 has the frozen Jacobian at
    ``params0``; order 2 adds the Hessian-direction term computed by
    jet-mode backpropagation (no Hessian is materialized).
    """
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")

    def gfn(params, x, cotangent):
        if order == 0:
            return fnet.tree_zeros_like(params0)
        if order == 1:
            return fnet.grad_params(spec, params0, x, cotangent)
        direction = fnet.tree_sub(params, params0)
        g0, g1 = fnet.grad_params_jet(spec, params0, direction, x, cotangent)
        return fnet.tree_add(g0, g1)

    return gfn
