"""Function-space inference with infinite-width kernels.

Covers the Bayesian NNGP posterior, infinite-time NTK regression,
closed-form finite-time gradient-descent dynamics under MSE, numerically
integrated dynamics for arbitrary losses (with optional momentum), marginal
and predictive likelihood scores, and conditioning diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

__all__ = [
    "NumericalError", "Kernels", "inference_kernels", "gp_inference",
    "gradient_descent_mse", "DynamicsResult", "LossSpec", "mse_loss",
    "cross_entropy_loss", "gradient_descent_ode", "marginal_nll",
    "condition_report", "ConditionReport",
]

EIG_FLOOR = 1e-12  # eigenvalues below EIG_FLOOR * lambda_max are clipped in inverses


class NumericalError(RuntimeError):
    pass


@dataclass
class Kernels:
    """Kernel blocks used by inference: train-train, test-train, test-test."""

    nngp_dd: Optional[np.ndarray] = None
    ntk_dd: Optional[np.ndarray] = None
    nngp_td: Optional[np.ndarray] = None
    ntk_td: Optional[np.ndarray] = None
    nngp_tt: Optional[np.ndarray] = None


def inference_kernels(kernel_fn: Callable, x_train, x_test=None,
                      compute_cov: bool = False) -> Kernels:
    """Evaluates a kernel function on the blocks needed for inference.

    ``kernel_fn(x1, x2=None)`` must return an object with ``nngp`` and
    ``ntk`` attributes (an analytic kernel, a Monte Carlo estimator, or a
    batched wrapper of either).
    """
    kdd = kernel_fn(x_train)
    out = Kernels(nngp_dd=kdd.nngp, ntk_dd=kdd.ntk)
    if x_test is not None:
        ktd = kernel_fn(x_test, x_train)
        out.nngp_td, out.ntk_td = ktd.nngp, ktd.ntk
    if compute_cov and x_test is not None:
        out.nngp_tt = kernel_fn(x_test).nngp
    return out


# ---------------------------------------------------------------------------
# Linear algebra helpers


def _as_2d(y):
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(-1, 1) if y.ndim == 1 else y


def _regularize(k, diag_reg):
    if diag_reg == 0.0:
        return k
    n = k.shape[0]
    # Scale by the mean trace so diag_reg is meaningful across kernel scales.
    return k + diag_reg * (np.trace(k) / n) * np.eye(n)


def _cho_factor(k):
    try:
        return scipy.linalg.cho_factor(k, lower=True)
    except scipy.linalg.LinAlgError as e:
        min_eig = float(scipy.linalg.eigvalsh(k).min())
        raise NumericalError(
            f"kernel is not positive definite after regularization: minimum "
            f"eigenvalue {min_eig:.6e}") from e


# ---------------------------------------------------------------------------
# Posterior / infinite-time inference


def gp_inference(kernels: Kernels, y_train, mode: str = "ntk",
                 diag_reg: float = 0.0, compute_cov: bool = False):
    """Posterior mean (and optionally covariance) of the infinite network.

    NNGP mode is the exact Bayesian posterior; NTK mode is the result of
    continuous gradient descent trained for infinite time (ensemble mean
    over initializations).  One Cholesky factorization is shared by all
    target columns (the per-class covariance is block diagonal).
    """
    if mode not in ("nngp", "ntk"):
        raise ValueError(f"mode must be 'nngp' or 'ntk', got {mode!r}")
    y = _as_2d(y_train)
    k_dd = kernels.nngp_dd if mode == "nngp" else kernels.ntk_dd
    k_td = kernels.nngp_td if mode == "nngp" else kernels.ntk_td
    if k_dd is None:
        raise ValueError(f"kernels.{mode}_dd is required for mode={mode!r}")
    factor = _cho_factor(_regularize(k_dd, diag_reg))
    if k_td is None:
        raise ValueError("kernels.*_td (test-train block) is required")
    alpha = scipy.linalg.cho_solve(factor, y)
    mean = k_td @ alpha
    if not compute_cov:
        return mean, None
    if kernels.nngp_tt is None:
        raise ValueError("compute_cov requires kernels.nngp_tt")
    if mode == "nngp":
        cov = kernels.nngp_tt - k_td @ scipy.linalg.cho_solve(factor, k_td.T)
    else:
        if kernels.nngp_dd is None or kernels.nngp_td is None:
            raise ValueError("NTK-mode covariance requires nngp_dd and nngp_td")
        a = scipy.linalg.cho_solve(factor, k_td.T)          # Theta^-1 Theta_td^T
        cov = (kernels.nngp_tt + a.T @ kernels.nngp_dd @ a
               - a.T @ kernels.nngp_td.T - kernels.nngp_td @ a)
    return mean, cov


# ---------------------------------------------------------------------------
# Closed-form MSE dynamics


@dataclass
class DynamicsResult:
    fx_train: np.ndarray
    fx_test: Optional[np.ndarray] = None
    cov_train: Optional[np.ndarray] = None
    cov_test: Optional[np.ndarray] = None


def gradient_descent_mse(ntk_dd, y_train, ntk_td=None, learning_rate: float = 1.0,
                         diag_reg: float = 0.0, nngp_dd=None, nngp_td=None,
                         nngp_tt=None) -> Callable:
    """Continuous gradient descent on MSE, solved in closed form per eigenmode.

    Returns ``predictor(t, fx_train=0., fx_test=0., compute_cov=False)``.
    ``t`` is continuous training time (learning_rate * steps for a discrete
    trainer whose update uses the gradient of 0.5 * sum of squares);
    ``t=None`` or ``np.inf`` gives the infinite-time limit symbolically.
    Covariances are over the Gaussian ensemble of initializations
    (fx at time 0 distributed as the NNGP) and require the nngp blocks.
    """
    eta = float(learning_rate)
    if eta <= 0:
        raise ValueError("learning_rate must be positive")
    y = _as_2d(y_train)
    theta = _regularize(np.asarray(ntk_dd, dtype=np.float64), diag_reg)
    evals, evecs = np.linalg.eigh(theta)
    lam_exp = np.maximum(evals, 0.0)
    lam_inv = np.maximum(evals, EIG_FLOOR * max(lam_exp.max(), np.finfo(float).tiny))

    def predictor(t, fx_train=0.0, fx_test=0.0, compute_cov: bool = False):
        if t is not None and not np.isinf(t) and t < 0:
            raise ValueError(f"t must be nonnegative, got {t}")
        infinite = t is None or np.isinf(t)
        if infinite:
            decay = np.zeros_like(lam_exp)
        else:
            decay = np.exp(-eta * lam_exp * t)
        f0_train = np.broadcast_to(np.asarray(fx_train, dtype=np.float64), y.shape)
        # train: Y + V e^{-eta lam t} V^T (f0 - Y)
        proj = evecs.T @ (f0_train - y)
        fx_train_t = y + evecs @ (decay[:, None] * proj)
        out = DynamicsResult(fx_train=fx_train_t)

        lam_op = (1.0 - decay) / lam_inv  # Theta^-1 (I - e^{-eta Theta t})
        if ntk_td is not None:
            f0_test = np.broadcast_to(np.asarray(fx_test, dtype=np.float64),
                                      (ntk_td.shape[0], y.shape[1]))
            rhs = evecs @ (lam_op[:, None] * (evecs.T @ (y - f0_train)))
            out.fx_test = f0_test + ntk_td @ rhs
        if compute_cov:
            if nngp_dd is None:
                raise ValueError("compute_cov requires nngp_dd")
            damp = evecs @ (decay[:, None] * evecs.T)
            out.cov_train = damp @ nngp_dd @ damp
            if ntk_td is not None:
                if nngp_td is None or nngp_tt is None:
                    raise ValueError("test covariance requires nngp_td and nngp_tt")
                q = ntk_td @ (evecs @ (lam_op[:, None] * evecs.T))
                out.cov_test = (nngp_tt + q @ nngp_dd @ q.T
                                - q @ nngp_td.T - nngp_td @ q.T)
        return out

    return predictor


# ---------------------------------------------------------------------------
# Numerical dynamics for arbitrary losses


@dataclass(frozen=True)
class LossSpec:
    """A loss on train outputs, given by its gradient map f_train -> dL/df."""

    kind: str
    grad: Callable


def mse_loss(y_train) -> LossSpec:
    y = _as_2d(y_train)
    return LossSpec(kind="mse", grad=lambda f: f - y)


def cross_entropy_loss(y_train) -> LossSpec:
    y = _as_2d(y_train)

    def grad(f):
        z = f - f.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return p - y
    return LossSpec(kind="cross_entropy", grad=grad)


def gradient_descent_ode(loss: LossSpec, ntk_dd, ntk_td=None,
                         learning_rate: float = 1.0,
                         momentum: Optional[float] = None) -> Callable:
    """Continuous gradient descent on an arbitrary loss, integrated
    numerically (adaptive Runge-Kutta, rtol 1e-8 / atol 1e-10).

    With ``momentum=gamma`` the second-order damped system
    f'' = -gamma f' - eta * Theta * grad_L(f) is integrated instead.
    Returns ``predictor(t, fx_train, fx_test=None)`` where ``t`` may be a
    scalar or an increasing array of times.
    """
    eta = float(learning_rate)
    theta_dd = np.asarray(ntk_dd, dtype=np.float64)
    theta_td = None if ntk_td is None else np.asarray(ntk_td, dtype=np.float64)
    n_train = theta_dd.shape[0]

    def predictor(t, fx_train, fx_test=None):
        ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
        scalar = np.ndim(t) == 0
        f0_train = _as_2d(fx_train)
        n_out = f0_train.shape[1]
        blocks = [f0_train.ravel()]
        has_test = theta_td is not None and fx_test is not None
        if has_test:
            f0_test = _as_2d(fx_test)
            blocks.append(f0_test.ravel())
        n_f = sum(b.size for b in blocks)
        if momentum is not None:
            blocks.append(np.zeros(n_f))  # start at rest
        y0 = np.concatenate(blocks)

        def rhs(_t, state):
            g = loss.grad(state[:n_train * n_out].reshape(n_train, n_out))
            drift = [-eta * (theta_dd @ g).ravel()]
            if has_test:
                drift.append(-eta * (theta_td @ g).ravel())
            force = np.concatenate(drift)
            if momentum is None:
                return force
            f, v = state[:n_f], state[n_f:]
            return np.concatenate([v, -momentum * v + force])

        t_end = float(ts[-1])
        if t_end == 0.0:
            sols = np.repeat(y0[None, :], len(ts), axis=0)
        else:
            sol = solve_ivp(rhs, (0.0, t_end), y0, t_eval=ts, method="RK45",
                            rtol=1e-8, atol=1e-10)
            if not sol.success:
                reached = sol.t[-1] if len(sol.t) else 0.0
                raise NumericalError(
                    f"ODE integration failed at t={reached:.6g}: {sol.message}")
            sols = sol.y.T
        f_train = sols[:, :n_train * n_out].reshape(len(ts), n_train, n_out)
        f_test = None
        if has_test:
            f_test = sols[:, n_train * n_out:n_f].reshape(len(ts), -1, n_out)
        if scalar:
            return f_train[0], (None if f_test is None else f_test[0])
        return f_train, f_test

    return predictor


# ---------------------------------------------------------------------------
# Model selection and diagnostics


def marginal_nll(k_dd, y_train, diag_reg: float = 0.0) -> float:
    """Mean negative log marginal likelihood per train point.

    Computes (0.5 y^T K~^-1 y + 0.5 log det K~ + N/2 log 2pi) / N averaged
    over target columns, with K~ the trace-scaled regularized kernel.
    """
    y = _as_2d(y_train)
    n = y.shape[0]
    k = _regularize(np.asarray(k_dd, dtype=np.float64), diag_reg)
    factor = _cho_factor(k)
    alpha = scipy.linalg.cho_solve(factor, y)
    quad = float(np.mean(np.sum(y * alpha, axis=0)))  # mean over classes
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    total = 0.5 * quad + 0.5 * logdet + 0.5 * n * np.log(2.0 * np.pi)
    return total / n


@dataclass(frozen=True)
class ConditionReport:
    min_eig: float
    max_eig: float
    condition_number: float
    clip_floor: float          # eigenvalues below this are clipped in inverses
    clipped_condition: float


def condition_report(k) -> ConditionReport:
    evals = scipy.linalg.eigvalsh(np.asarray(k, dtype=np.float64))
    lo, hi = float(evals[0]), float(evals[-1])
    cond = np.inf if lo <= 0 else hi / lo
    floor = EIG_FLOOR * hi
    clipped = hi / max(lo, floor) if hi > 0 else np.inf
    return ConditionReport(min_eig=lo, max_eig=hi, condition_number=cond,
                           clip_floor=floor, clipped_condition=clipped)
