"""Dataset ingestion: CSV files, binary image tensors, synthetic generators."""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from .batching import read_matrix, write_matrix

__all__ = ["load_dataset", "save_csv", "save_image_dataset",
           "make_sin_dataset", "make_texture_dataset"]


def make_sin_dataset(n: int, noise: float = 0.0, seed: int = 0):
    """y = sin(x) + eps with x ~ Uniform(-pi, pi), eps ~ N(0, noise^2)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    x = rng.uniform(-np.pi, np.pi, size=(n, 1))
    y = np.sin(x) + noise * rng.standard_normal((n, 1))
    return x, y


def make_texture_dataset(n: int, classes: int = 10, hw: tuple[int, int] = (8, 8),
                         seed: int = 0):
    """Texture-classification images: white noise filtered by a fixed
    class-specific 3x3 kernel, so class identity lives in local second-order
    statistics rather than global pixel positions.

    Returns (x, y, labels): x is (n, H, W, 1), y are zero-mean one-hot
    regression targets of shape (n, classes).
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    h, w = hw
    filters = rng.standard_normal((classes, 3, 3))
    filters /= np.sqrt((filters ** 2).sum(axis=(1, 2)))[:, None, None]
    labels = rng.integers(0, classes, size=n)
    x = np.empty((n, h, w, 1))
    for i in range(n):
        z = rng.standard_normal((h + 2, w + 2))
        f = filters[labels[i]]
        img = np.zeros((h, w))
        for dh in range(3):
            for dw in range(3):
                img += f[dh, dw] * z[dh:dh + h, dw:dw + w]
        img -= img.mean()
        img /= np.sqrt((img ** 2).mean()) + 1e-12
        x[i, :, :, 0] = img
    y = np.full((n, classes), -1.0 / classes)
    y[np.arange(n), labels] += 1.0
    return x, y, labels


# ---------------------------------------------------------------------------
# CSV format: header row, feature columns prefixed x, target columns prefixed y


def save_csv(path, x, y) -> None:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    header = ",".join([f"x{i}" for i in range(x.shape[1])]
                      + [f"y{i}" for i in range(y.shape[1])])
    np.savetxt(path, np.hstack([x, y]), delimiter=",", header=header,
               comments="", fmt="%.17g")


def _load_csv(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xcols = [i for i, c in enumerate(header) if c.strip().startswith("x")]
    ycols = [i for i, c in enumerate(header) if c.strip().startswith("y")]
    if not xcols:
        raise ValueError(f"{path}: no feature columns (header names prefixed 'x')")
    return data[:, xcols], (data[:, ycols] if ycols else None)


# ---------------------------------------------------------------------------
# Binary image dataset: NTKM payloads plus a JSON shape sidecar


def save_image_dataset(directory, x, y, name: str = "data") -> str:
    """Writes x (n, H, W, C) and y (n, C) as NTKM files plus a sidecar JSON;
    returns the sidecar path (the loadable dataset source)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    os.makedirs(directory, exist_ok=True)
    x_file = f"{name}_x.ntkm"
    y_file = f"{name}_y.ntkm"
    write_matrix(os.path.join(directory, x_file), x.reshape(x.shape[0], -1))
    write_matrix(os.path.join(directory, y_file), y)
    sidecar = {"x": {"file": x_file, "shape": list(x.shape)},
               "y": {"file": y_file}}
    path = os.path.join(directory, f"{name}.json")
    with open(path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return path


def _load_sidecar(path):
    with open(path) as f:
        meta = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    x = read_matrix(os.path.join(base, meta["x"]["file"]))
    x = x.reshape(tuple(meta["x"]["shape"]))
    y = None
    if "y" in meta:
        y = read_matrix(os.path.join(base, meta["y"]["file"]))
    return x, y


# ---------------------------------------------------------------------------


def load_dataset(source):
    """Loads (x, y) from a CSV path, an image-sidecar JSON path, or a
    synthetic generator spec.

    Synthetic specs are dicts (or inline JSON strings) like
    ``{"kind": "sin", "n": 20, "noise": 0.1, "seed": 0}`` or
    ``{"kind": "texture", "n": 100, "classes": 10, "hw": [8, 8], "seed": 0}``.
    """
    if isinstance(source, str) and source.lstrip().startswith("{"):
        source = json.loads(source)
    if isinstance(source, dict):
        kind = source.get("kind")
        if kind == "sin":
            return make_sin_dataset(int(source.get("n", 20)),
                                    float(source.get("noise", 0.0)),
                                    int(source.get("seed", 0)))
        if kind == "texture":
            x, y, _ = make_texture_dataset(int(source.get("n", 100)),
                                           int(source.get("classes", 10)),
                                           tuple(source.get("hw", (8, 8))),
                                           int(source.get("seed", 0)))
            return x, y
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    if not isinstance(source, (str, os.PathLike)):
        raise ValueError(f"cannot interpret dataset source {source!r}")
    s = str(source)
    if not os.path.exists(s):
        raise FileNotFoundError(f"dataset source not found: {s}")
    if s.endswith(".csv"):
        return _load_csv(s)
    if s.endswith(".json"):
        return _load_sidecar(s)
    raise ValueError(f"unsupported dataset file {s!r} (expected .csv or .json)")
