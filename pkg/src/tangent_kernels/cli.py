"""Command-line experiment runner.

Subcommands mirror the library workflows: ``kernel`` (Gram matrices),
``infer`` (GP posterior / infinite-time predictions), ``dynamics``
(training-time evolution), ``mc`` (Monte Carlo convergence grids) and
``ensemble`` (finite-network ensembles vs. the analytic Gaussian).
Outputs are CSV files plus a gnuplot script per command; runs are
deterministic given (config, seed).

Exit codes: 0 success, 2 config/validation error, 3 numerical error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import batching, datasets, empirical, predict
from . import finite_net as fnet
from .kernel_engine import kernel_fn
from .netspec import NetSpec, scale_widths, spec_from_json, validate

_NTKM_THRESHOLD = 250_000  # entries; larger kernel outputs also get .ntkm files


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Option plumbing


def _build_parser():
    p = argparse.ArgumentParser(
        prog="tangent-kernels",
        description="Infinite-width network kernels: exact computation, "
                    "inference, dynamics, and finite-width cross-validation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option defaults")
        sp.add_argument("--arch", help="architecture JSON file")
        sp.add_argument("--data", help="dataset: CSV/sidecar path or inline JSON spec")
        sp.add_argument("--test-data", dest="test_data",
                        help="test dataset (same forms as --data)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--mode", choices=("nngp", "ntk"), default=None)
        sp.add_argument("--diag-reg", dest="diag_reg", type=float, default=None)
        sp.add_argument("--t", help="comma-separated list of times, e.g. 0.1,1,10")
        sp.add_argument("--n-samples", dest="n_samples", type=int, default=None)
        sp.add_argument("--widths", help="comma-separated widening factors")
        sp.add_argument("--ensemble", type=int, default=None)
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--momentum", type=float, default=None)
        sp.add_argument("--order", type=int, default=None,
                        help="Taylor order for ensemble approximant training")
        sp.add_argument("--compute-cov", dest="compute_cov", action="store_true",
                        default=None)
        sp.add_argument("--loss", choices=("mse", "cross_entropy"), default=None)
        sp.add_argument("--spill", action="store_true", default=None,
                        help="assemble kernels on disk (NTKM memory maps)")
        return sp

    for name, fn in _COMMANDS.items():
        common(sub.add_parser(name, help=fn.__doc__))
    return p


_DEFAULTS = {
    "seed": 0, "batch_size": 0, "workers": 1, "mode": "ntk", "diag_reg": 0.0,
    "t": "", "n_samples": 16, "widths": "1", "ensemble": 8, "steps": 100,
    "lr": 1.0, "momentum": None, "order": None, "compute_cov": False,
    "loss": "mse", "spill": False, "arch": None, "data": None,
    "test_data": None, "out": None,
}


def _resolve(args) -> dict:
    cfg = dict(_DEFAULTS)
    if args.config:
        try:
            with open(args.config) as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad config JSON: {e}") from e
        unknown = set(loaded) - set(_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in _DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if not cfg.get(k):
            raise ConfigError(f"--{k.replace('_', '-')} is required for this command")


def _load_arch(cfg) -> NetSpec:
    _require(cfg, "arch")
    try:
        with open(cfg["arch"]) as f:
            spec = spec_from_json(f.read())
    except FileNotFoundError:
        raise ConfigError(f"architecture file not found: {cfg['arch']}")
    errs = validate(spec)
    if errs:
        raise ConfigError("invalid architecture:\n"
                          + "\n".join(str(e) for e in errs))
    return spec


def _load_data(cfg, key="data"):
    _require(cfg, key)
    try:
        return datasets.load_dataset(cfg[key])
    except FileNotFoundError as e:
        raise ConfigError(str(e))
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad dataset spec {cfg[key]!r}: {e}")


def _out_dir(cfg) -> str:
    _require(cfg, "out")
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def _parse_floats(text) -> list[float]:
    if not text:
        return []
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


def _kernel_callable(spec, cfg):
    base = lambda a, b=None, **kw: kernel_fn(spec, a, b, **kw)
    if cfg["batch_size"]:
        return batching.batch(base, cfg["batch_size"], cfg["workers"])
    return base


def _write_csv(path, header, rows):
    arr = np.asarray(rows, dtype=np.float64)
    np.savetxt(path, arr.reshape(arr.shape[0], -1), delimiter=",",
               header=",".join(header), comments="", fmt="%.17g")


def _write_gnuplot(out, name, lines):
    with open(os.path.join(out, f"{name}.gp"), "w") as f:
        f.write("set datafile separator ','\nset key autotitle columnhead\n")
        f.write("\n".join(lines) + "\n")


def _save_config(cfg, out):
    with open(os.path.join(out, "run_config.json"), "w") as f:
        json.dump({k: v for k, v in cfg.items() if v is not None},
                  f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Commands


def cmd_kernel(cfg) -> None:
    """Compute NNGP/NTK Gram matrices and write them as CSV (and NTKM)."""
    spec = _load_arch(cfg)
    x1, _ = _load_data(cfg)
    x2 = None
    if cfg["test_data"]:
        x2, _ = _load_data(cfg, "test_data")
    out = _out_dir(cfg)
    kf = _kernel_callable(spec, cfg)
    k = kf(x1) if x2 is None else kf(x1, x2)
    for name, mat in (("nngp", k.nngp), ("ntk", k.ntk)):
        mat = np.asarray(mat)
        np.savetxt(os.path.join(out, f"{name}.csv"), mat, delimiter=",",
                   fmt="%.17g")
        if mat.size > _NTKM_THRESHOLD or cfg["spill"]:
            batching.write_matrix(os.path.join(out, f"{name}.ntkm"), mat)
    _save_config(cfg, out)


def cmd_infer(cfg) -> None:
    """GP inference: posterior/infinite-time mean, covariance, NLL, conditioning."""
    spec = _load_arch(cfg)
    x_train, y_train = _load_data(cfg)
    if y_train is None:
        raise ConfigError("--data must include targets (y columns) for infer")
    x_test, _ = _load_data(cfg, "test_data")
    out = _out_dir(cfg)
    kf = _kernel_callable(spec, cfg)
    kernels = predict.inference_kernels(kf, x_train, x_test,
                                        compute_cov=cfg["compute_cov"])
    mean, cov = predict.gp_inference(kernels, y_train, mode=cfg["mode"],
                                     diag_reg=cfg["diag_reg"],
                                     compute_cov=cfg["compute_cov"])
    np.savetxt(os.path.join(out, "mean.csv"), mean, delimiter=",", fmt="%.17g")
    if cov is not None:
        np.savetxt(os.path.join(out, "cov.csv"), cov, delimiter=",", fmt="%.17g")
    k_dd = kernels.ntk_dd if cfg["mode"] == "ntk" else kernels.nngp_dd
    nll = predict.marginal_nll(k_dd, y_train, cfg["diag_reg"])
    with open(os.path.join(out, "nll.txt"), "w") as f:
        f.write(f"marginal_nll_per_point {nll:.17g}\n")
    rep = predict.condition_report(k_dd)
    with open(os.path.join(out, "condition.txt"), "w") as f:
        f.write(f"min_eig {rep.min_eig:.17g}\nmax_eig {rep.max_eig:.17g}\n"
                f"condition_number {rep.condition_number:.17g}\n"
                f"clip_floor {rep.clip_floor:.17g}\n"
                f"clipped_condition {rep.clipped_condition:.17g}\n")
    _write_gnuplot(cfg["out"], "plot", [
        "plot 'mean.csv' matrix with image title 'posterior mean'"])
    _save_config(cfg, out)


def cmd_dynamics(cfg) -> None:
    """Function-space training dynamics: closed form (MSE) and/or ODE path."""
    spec = _load_arch(cfg)
    x_train, y_train = _load_data(cfg)
    if y_train is None:
        raise ConfigError("--data must include targets (y columns) for dynamics")
    x_test = None
    if cfg["test_data"]:
        x_test, _ = _load_data(cfg, "test_data")
    out = _out_dir(cfg)
    ts = _parse_floats(cfg["t"]) or [0.1, 1.0, 10.0]
    kf = _kernel_callable(spec, cfg)
    kernels = predict.inference_kernels(kf, x_train, x_test)

    closed = predict.gradient_descent_mse(
        kernels.ntk_dd, y_train, ntk_td=kernels.ntk_td,
        learning_rate=cfg["lr"], diag_reg=cfg["diag_reg"])
    loss_spec = (predict.mse_loss(y_train) if cfg["loss"] == "mse"
                 else predict.cross_entropy_loss(y_train))
    ode = predict.gradient_descent_ode(
        loss_spec, kernels.ntk_dd, kernels.ntk_td,
        learning_rate=cfg["lr"], momentum=cfg["momentum"])

    y2 = y_train.reshape(len(y_train), -1)
    f_tr_ode, f_te_ode = ode(np.asarray(ts), np.zeros_like(y2),
                             None if x_test is None
                             else np.zeros((len(x_test), y2.shape[1])))
    loss_rows, pred_rows_cf, pred_rows_ode = [], [], []
    for i, t in enumerate(ts):
        r = closed(t)
        loss_cf = float(np.mean((r.fx_train - y2) ** 2))
        loss_ode = float(np.mean((f_tr_ode[i] - y2) ** 2))
        loss_rows.append([t, loss_cf, loss_ode])
        if x_test is not None:
            pred_rows_cf.append([t] + list(r.fx_test.ravel()))
            pred_rows_ode.append([t] + list(f_te_ode[i].ravel()))
    _write_csv(os.path.join(out, "loss_vs_t.csv"),
               ["t", "train_mse_closed_form", "train_mse_ode"], loss_rows)
    if x_test is not None:
        cols = [f"f{j}" for j in range(len(pred_rows_cf[0]) - 1)]
        _write_csv(os.path.join(out, "predictions_closed_form.csv"),
                   ["t"] + cols, pred_rows_cf)
        _write_csv(os.path.join(out, "predictions_ode.csv"),
                   ["t"] + cols, pred_rows_ode)
    _write_gnuplot(out, "plot", [
        "set logscale x", "plot 'loss_vs_t.csv' using 1:2 with linespoints, "
        "'loss_vs_t.csv' using 1:3 with linespoints"])
    _save_config(cfg, out)


def cmd_mc(cfg) -> None:
    """Monte Carlo convergence grid: kernel distance vs (width, n_samples)."""
    spec = _load_arch(cfg)
    x1, _ = _load_data(cfg)
    x2 = None
    if cfg["test_data"]:
        x2, _ = _load_data(cfg, "test_data")
    out = _out_dir(cfg)
    widths = _parse_floats(cfg["widths"]) or [1.0]
    n_max = cfg["n_samples"]
    grid = sorted({2 ** k for k in range(3, 30) if 2 ** k <= n_max} | {n_max})
    if n_max < 8:
        grid = [n_max]
    exact = kernel_fn(spec, x1, x2)
    norm_nngp = float(np.sum(exact.nngp ** 2))
    norm_ntk = float(np.sum(exact.ntk ** 2))
    rows = []
    for factor in widths:
        scaled = scale_widths(spec, factor)
        mean_nngp = mean_ntk = None
        n_seen = 0
        it = empirical.monte_carlo_samples(scaled, cfg["seed"], n_max, x1, x2)
        for nngp_k, ntk_k, _w in it:
            n_seen += 1
            if mean_nngp is None:
                mean_nngp, mean_ntk = nngp_k.copy(), ntk_k.copy()
            else:
                mean_nngp += (nngp_k - mean_nngp) / n_seen
                mean_ntk += (ntk_k - mean_ntk) / n_seen
            if n_seen in grid:
                d_nngp = float(np.sum((mean_nngp - exact.nngp) ** 2)) / norm_nngp
                d_ntk = float(np.sum((mean_ntk - exact.ntk) ** 2)) / norm_ntk
                rows.append([factor, n_seen, d_nngp, d_ntk])
    _write_csv(os.path.join(out, "mc_distance.csv"),
               ["width_factor", "n_samples", "nngp_distance", "ntk_distance"],
               rows)
    _write_gnuplot(out, "plot", [
        "set logscale xy",
        "plot 'mc_distance.csv' using 2:3 with points title 'nngp', "
        "'mc_distance.csv' using 2:4 with points title 'ntk'"])
    _save_config(cfg, out)


def cmd_ensemble(cfg) -> None:
    """Train an ensemble of finite nets; overlay the analytic mean/std."""
    spec = _load_arch(cfg)
    x_train, y_train = _load_data(cfg)
    if y_train is None:
        raise ConfigError("--data must include targets (y columns) for ensemble")
    x_test = None
    if cfg["test_data"]:
        x_test, _ = _load_data(cfg, "test_data")
    out = _out_dir(cfg)
    n_nets = cfg["ensemble"]
    steps = cfg["steps"]
    lr = cfg["lr"]
    y2 = np.asarray(y_train, dtype=np.float64).reshape(len(y_train), -1)

    kernels = predict.inference_kernels(
        _kernel_callable(spec, cfg), x_train, x_test, compute_cov=True)
    closed = predict.gradient_descent_mse(
        kernels.ntk_dd, y_train, ntk_td=kernels.ntk_td, learning_rate=lr,
        diag_reg=cfg["diag_reg"], nngp_dd=kernels.nngp_dd,
        nngp_td=kernels.nngp_td, nngp_tt=kernels.nngp_tt)

    opt = (fnet.Sgd(lr) if cfg["momentum"] is None
           else fnet.Momentum(lr, cfg["momentum"]))
    root = np.random.SeedSequence(cfg["seed"])
    members = root.spawn(n_nets)
    losses = np.empty((n_nets, steps + 1))
    finals = []
    for i, child in enumerate(members):
        params = fnet.init_params(spec, child)
        apply_fn = grad_fn = None
        if cfg["order"] is not None:
            apply_fn = empirical.taylor_expand(spec, params, cfg["order"])
            grad_fn = empirical.taylor_grad_fn(spec, params, cfg["order"])
        res = fnet.train(spec, params, x_train, y2, opt, steps,
                         x_test=x_test, apply_fn=apply_fn, grad_fn=grad_fn)
        losses[i] = res.train_losses
        if x_test is not None:
            final_apply = apply_fn if apply_fn is not None else (
                lambda p, x: fnet.apply(spec, p, x))
            finals.append(final_apply(res.params, x_test))

    t_grid = np.arange(steps + 1) * lr
    loss_rows = []
    for s, t in enumerate(t_grid):
        r = closed(t, compute_cov=True)
        analytic = float(np.mean((r.fx_train - y2) ** 2)
                         + np.mean(np.diag(r.cov_train)))
        loss_rows.append([t, losses[:, s].mean(), losses[:, s].std(), analytic])
    _write_csv(os.path.join(out, "train_loss.csv"),
               ["t", "ensemble_mean", "ensemble_std", "analytic_mean"],
               loss_rows)
    if x_test is not None:
        r = closed(t_grid[-1], compute_cov=True)
        stack = np.stack(finals)  # (nets, test, C)
        rows = []
        for j in range(stack.shape[1]):
            rows.append([x_test.reshape(len(x_test), -1)[j, 0],
                         stack[:, j, 0].mean(), stack[:, j, 0].std(),
                         r.fx_test[j, 0], np.sqrt(max(r.cov_test[j, j], 0.0))])
        _write_csv(os.path.join(out, "predictions.csv"),
                   ["x0", "ensemble_mean", "ensemble_std",
                    "analytic_mean", "analytic_std"], rows)
    _write_gnuplot(out, "plot", [
        "plot 'train_loss.csv' using 1:2 with lines title 'ensemble', "
        "'train_loss.csv' using 1:4 with lines title 'analytic'"])
    _save_config(cfg, out)


_COMMANDS = {
    "kernel": cmd_kernel,
    "infer": cmd_infer,
    "dynamics": cmd_dynamics,
    "mc": cmd_mc,
    "ensemble": cmd_ensemble,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        _COMMANDS[args.command](cfg)
        return 0
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (predict.NumericalError, fnet.DivergenceError,
            np.linalg.LinAlgError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
