"""Architecture trees: layer nodes, combinators, validation and planning.

A :class:`NetSpec` is a tree of layer nodes that simultaneously defines a
finite network (see :mod:`tangent_kernels.finite_net`) and the infinite-width
kernel map (see :mod:`tangent_kernels.kernel_engine`).  The tree is immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Union

__all__ = [
    "Dense", "Conv", "ABRelu", "Erf", "Identity", "Flatten", "AvgPool",
    "GlobalAvgPool", "Dropout", "FanOut", "FanInSum", "Serial", "Parallel",
    "relu", "leaky_relu", "abs_nonlin", "serial", "parallel",
    "NetSpec", "Violation", "Representation", "RepresentationPlan",
    "validate", "plan_representation", "spec_to_json", "spec_from_json",
    "scale_widths",
]

PADDINGS = ("SAME", "VALID", "CIRCULAR")


@dataclass(frozen=True)
class Dense:
    width: int
    w_std: float = 1.0
    b_std: float = 0.0


@dataclass(frozen=True)
class Conv:
    channels: int
    filter_shape: tuple[int, int] = (3, 3)
    strides: tuple[int, int] = (1, 1)
    padding: str = "SAME"
    w_std: float = 1.0
    b_std: float = 0.0


@dataclass(frozen=True)
class ABRelu:
    """Piecewise-linear nonlinearity a*min(x, 0) + b*max(x, 0)."""

    a: float
    b: float


@dataclass(frozen=True)
class Erf:
    pass


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class AvgPool:
    window: tuple[int, int]
    strides: tuple[int, int] = (1, 1)
    padding: str = "VALID"


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class FanOut:
    n: int


@dataclass(frozen=True)
class FanInSum:
    pass


@dataclass(frozen=True)
class Serial:
    children: tuple


@dataclass(frozen=True)
class Parallel:
    children: tuple


Layer = Union[Dense, Conv, ABRelu, Erf, Identity, Flatten, AvgPool,
              GlobalAvgPool, Dropout, FanOut, FanInSum, Serial, Parallel]


def relu() -> ABRelu:
    return ABRelu(0.0, 1.0)


def abs_nonlin() -> ABRelu:
    return ABRelu(-1.0, 1.0)


def leaky_relu(alpha: float) -> ABRelu:
    return ABRelu(alpha, 1.0)


def serial(*layers: Layer) -> Serial:
    return Serial(tuple(layers))


def parallel(*layers: Layer) -> Parallel:
    return Parallel(tuple(layers))


@dataclass(frozen=True)
class NetSpec:
    """An architecture tree plus the input shape it expects.

    ``input_shape`` is either ``(features,)`` for vector inputs or
    ``(H, W, C)`` for image inputs (NHWC batch layout).
    """

    root: Layer
    input_shape: tuple

    def __post_init__(self):
        if len(self.input_shape) not in (1, 3):
            raise ValueError(
                f"input_shape must be (features,) or (H, W, C), got {self.input_shape}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))


@dataclass(frozen=True)
class Violation:
    path: tuple[int, ...]
    rule: str
    message: str

    def __str__(self):
        loc = "/".join(str(i) for i in self.path) or "<root>"
        return f"[{self.rule}] at node {loc}: {self.message}"


class Representation(Enum):
    """How much of the spatial covariance structure a kernel carries."""

    VECTOR = 0    # |X1| x |X2|
    MARGINAL = 1  # |X1| x |X2| x H x W        (same-pixel blocks only)
    FULL = 2      # |X1| x |X2| x H x W x H x W (all pixel pairs)


# ---------------------------------------------------------------------------
# Tree traversal helpers


def iter_nodes(layer: Layer, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple, Layer]]:
    """Yields (path, node) pairs in depth-first (execution) order."""
    yield path, layer
    if isinstance(layer, (Serial, Parallel)):
        for i, child in enumerate(layer.children):
            yield from iter_nodes(child, path + (i,))


def _node_name(layer: Layer) -> str:
    return type(layer).__name__


# ---------------------------------------------------------------------------
# Shapes

# A signal shape is ("vector", features) or ("image", H, W, C).


def _infer_shape(layer, shape, path, violations):
    """Returns the output signal shape of `layer` applied to `shape`.

    Shape errors are appended to `violations`; inference continues with a
    best-effort shape so that multiple problems are reported in one pass.
    """
    kind = shape[0]

    if isinstance(layer, Dense):
        if layer.width < 1:
            violations.append(Violation(path, "positive-width",
                                        f"Dense width must be >= 1, got {layer.width}"))
        if kind == "vector":
            return ("vector", layer.width)
        return ("image", shape[1], shape[2], layer.width)

    if isinstance(layer, Conv):
        if layer.channels < 1:
            violations.append(Violation(path, "positive-width",
                                        f"Conv channels must be >= 1, got {layer.channels}"))
        if any(f < 1 for f in layer.filter_shape) or any(s < 1 for s in layer.strides):
            violations.append(Violation(path, "filter-geometry",
                                        "filter and stride entries must be >= 1"))
            return shape
        if layer.padding not in PADDINGS:
            violations.append(Violation(path, "padding",
                                        f"unknown padding {layer.padding!r}"))
            return shape
        if kind != "image":
            violations.append(Violation(path, "spatial-input",
                                        "Conv requires a spatial (image) input"))
            return shape
        from .geometry import out_size
        h = out_size(shape[1], layer.filter_shape[0], layer.strides[0], layer.padding)
        w = out_size(shape[2], layer.filter_shape[1], layer.strides[1], layer.padding)
        if h < 1 or w < 1:
            violations.append(Violation(path, "filter-geometry",
                                        f"filter {layer.filter_shape} does not fit "
                                        f"{shape[1]}x{shape[2]} input with VALID padding"))
            return shape
        return ("image", h, w, layer.channels)

    if isinstance(layer, AvgPool):
        if any(f < 1 for f in layer.window) or any(s < 1 for s in layer.strides):
            violations.append(Violation(path, "filter-geometry",
                                        "window and stride entries must be >= 1"))
            return shape
        if layer.padding not in PADDINGS:
            violations.append(Violation(path, "padding",
                                        f"unknown padding {layer.padding!r}"))
            return shape
        if kind != "image":
            violations.append(Violation(path, "spatial-input",
                                        "AvgPool requires a spatial input"))
            return shape
        from .geometry import out_size
        h = out_size(shape[1], layer.window[0], layer.strides[0], layer.padding)
        w = out_size(shape[2], layer.window[1], layer.strides[1], layer.padding)
        if h < 1 or w < 1:
            violations.append(Violation(path, "filter-geometry",
                                        f"window {layer.window} does not fit input"))
            return shape
        return ("image", h, w, shape[3])

    if isinstance(layer, GlobalAvgPool):
        if kind != "image":
            violations.append(Violation(path, "spatial-input",
                                        "GlobalAvgPool requires a spatial input"))
            return shape
        return ("vector", shape[3])

    if isinstance(layer, Flatten):
        if kind == "image":
            return ("vector", shape[1] * shape[2] * shape[3])
        return shape

    if isinstance(layer, ABRelu):
        if layer.a > layer.b:
            violations.append(Violation(path, "abrelu-order",
                                        f"ABRelu requires a <= b, got ({layer.a}, {layer.b})"))
        return shape

    if isinstance(layer, Dropout):
        if not (0.0 < layer.rate <= 1.0):
            violations.append(Violation(path, "dropout-rate",
                                        f"rate must be in (0, 1], got {layer.rate}"))
        return shape

    if isinstance(layer, (Erf, Identity)):
        return shape

    raise TypeError(f"unexpected layer type {type(layer).__name__}")


# ---------------------------------------------------------------------------
# Validation


def validate(spec: NetSpec) -> list[Violation]:
    """Checks a NetSpec against all structural invariants.

    Returns an empty list iff the spec is valid.  Violations name the
    offending node path (child indices from the root) and the rule broken.
    """
    violations: list[Violation] = []
    in_shape = (("vector", spec.input_shape[0]) if len(spec.input_shape) == 1
                else ("image",) + spec.input_shape)
    out = _walk_validate(spec.root, (), in_shape, False, violations)
    if out is not None:
        shape, _gaussian = out
        if shape[0] != "vector":
            violations.append(Violation((), "vector-output",
                                        "network must collapse spatial axes (Flatten or "
                                        "GlobalAvgPool) before its output"))
    return violations


def _walk_validate(layer, path, shape, gaussian, violations):
    """Propagates (shape, is_gaussian) through the tree, collecting violations.

    is_gaussian mirrors the kernel engine: affine outputs are Gaussian,
    nonlinearity/dropout outputs are not, and structural ops preserve the flag.
    """
    if isinstance(layer, Serial):
        if not layer.children:
            violations.append(Violation(path, "non-empty", "Serial must have children"))
            return shape, gaussian
        i = 0
        n = len(layer.children)
        while i < n:
            child = layer.children[i]
            if isinstance(child, FanOut):
                # FanOut must be immediately followed by a matching Parallel
                # and then FanInSum.
                if child.n < 1:
                    violations.append(Violation(path + (i,), "fanout-arity",
                                                f"FanOut n must be >= 1, got {child.n}"))
                par = layer.children[i + 1] if i + 1 < n else None
                fis = layer.children[i + 2] if i + 2 < n else None
                if not isinstance(par, Parallel) or not isinstance(fis, FanInSum):
                    violations.append(Violation(
                        path + (i,), "fanout-matching",
                        "FanOut must be immediately followed by Parallel and FanInSum"))
                    i += 1
                    continue
                if len(par.children) != child.n:
                    violations.append(Violation(
                        path + (i + 1,), "fanout-matching",
                        f"Parallel arity {len(par.children)} does not match FanOut({child.n})"))
                branch_outs = []
                for j, branch in enumerate(par.children):
                    branch_outs.append(_walk_validate(
                        branch, path + (i + 1, j), shape, gaussian, violations))
                shapes = {s for s, _ in branch_outs}
                if len(shapes) > 1:
                    violations.append(Violation(
                        path + (i + 2,), "faninsum-shapes",
                        f"FanInSum branches disagree on shape: {sorted(shapes)}"))
                shape = branch_outs[0][0]
                gaussian = all(g for _, g in branch_outs)
                i += 3
                continue
            if isinstance(child, (Parallel, FanInSum)):
                violations.append(Violation(
                    path + (i,), "fanout-matching",
                    f"{_node_name(child)} must be part of a FanOut/Parallel/FanInSum group"))
                i += 1
                continue
            shape, gaussian = _walk_validate(child, path + (i,), shape, gaussian, violations)
            i += 1
        return shape, gaussian

    if isinstance(layer, Parallel):
        if not layer.children:
            violations.append(Violation(path, "non-empty", "Parallel must have children"))
        violations.append(Violation(path, "fanout-matching",
                                    "Parallel outside a FanOut group"))
        return shape, gaussian

    if isinstance(layer, (FanOut, FanInSum)):
        violations.append(Violation(path, "fanout-matching",
                                    f"{_node_name(layer)} outside a Serial group"))
        return shape, gaussian

    if isinstance(layer, (ABRelu, Erf)):
        if not gaussian:
            violations.append(Violation(
                path, "affine-before-nonlinearity",
                f"{_node_name(layer)} applied to a non-Gaussian signal; nonlinearities "
                "must be preceded by Dense or Conv (possibly through FanInSum)"))
        shape = _infer_shape(layer, shape, path, violations)
        return shape, False

    shape = _infer_shape(layer, shape, path, violations)
    if isinstance(layer, (Dense, Conv)):
        return shape, True
    if isinstance(layer, Dropout):
        return shape, False
    # Flatten, pooling and Identity preserve Gaussianity.
    return shape, gaussian


# ---------------------------------------------------------------------------
# Representation planning


@dataclass(frozen=True)
class RepresentationPlan:
    """Per-node output representation chosen for the kernel computation.

    ``tags`` maps node path -> Representation of that node's output kernel.
    ``input_rep`` is the representation the input kernel is built in.
    ``flatten_input`` marks the cheap case of a leading Flatten on image
    inputs, where the input kernel is built directly in VECTOR form.
    """

    tags: dict
    input_rep: Representation
    flatten_input: bool = False

    def tag(self, path: tuple[int, ...]) -> Representation:
        return self.tags[path]


def plan_representation(spec: NetSpec, force_full: bool = False) -> RepresentationPlan:
    """Chooses the cheapest representation every node can be computed in.

    A single backward pass propagates the demand for off-diagonal pixel
    covariance: pooling layers demand FULL from everything upstream, a
    Flatten readout demands only MARGINAL, dense-only networks stay VECTOR.
    ``force_full`` keeps every spatial node in FULL form (used for
    self-consistency checks).
    """
    errs = validate(spec)
    if errs:
        raise ValueError("invalid NetSpec:\n" + "\n".join(str(e) for e in errs))

    tags: dict = {}
    vector_input = len(spec.input_shape) == 1
    out_req = Representation.VECTOR
    in_req = _walk_plan(spec.root, (), out_req, tags, force_full)

    if vector_input:
        in_req = Representation.VECTOR

    flatten_input = False
    if not vector_input and in_req is not Representation.VECTOR:
        first = _first_executed(spec.root, ())
        if first is not None and isinstance(first[1], Flatten) and not force_full:
            # No convolution touches the raw pixels: fold the image axes into
            # features and run the whole computation in VECTOR form.
            flatten_input = True
            in_req = Representation.VECTOR
            _retag_vector_prefix(tags, first[0])
    return RepresentationPlan(tags=tags, input_rep=in_req, flatten_input=flatten_input)


def _first_executed(layer, path):
    if isinstance(layer, Serial):
        if not layer.children:
            return None
        return _first_executed(layer.children[0], path + (0,))
    return path, layer


def _retag_vector_prefix(tags, flatten_path):
    tags[flatten_path] = Representation.VECTOR
    # Serial ancestors of the leading Flatten keep their (unchanged) tags.


def _walk_plan(layer, path, out_req, tags, force_full):
    """Backward pass: given the representation demanded of this node's
    output, record the node tag and return the demand on its input."""
    full = Representation.FULL
    if isinstance(layer, Serial):
        tags[path] = out_req
        req = out_req
        for i in range(len(layer.children) - 1, -1, -1):
            req = _walk_plan(layer.children[i], path + (i,), req, tags, force_full)
        return req
    if isinstance(layer, Parallel):
        tags[path] = out_req
        reqs = [_walk_plan(c, path + (i,), out_req, tags, force_full)
                for i, c in enumerate(layer.children)]
        return max(reqs, key=lambda r: r.value)
    if isinstance(layer, Flatten):
        tags[path] = Representation.VECTOR
        return full if force_full else Representation.MARGINAL
    if isinstance(layer, GlobalAvgPool):
        tags[path] = Representation.VECTOR
        return full
    if isinstance(layer, AvgPool):
        tags[path] = full if force_full else out_req
        return full
    if isinstance(layer, Conv):
        req = full if force_full else out_req
        tags[path] = req
        return req
    # Pointwise and structural ops pass the demand through.
    tags[path] = out_req
    if force_full and out_req is not Representation.VECTOR:
        tags[path] = full
        return full
    return out_req


def scale_widths(spec: NetSpec, factor: float) -> NetSpec:
    """Scales every Dense width and Conv channel count by ``factor``
    (minimum 1).  Widths do not change the analytic kernel; this drives
    finite-width convergence studies."""
    def walk(layer):
        if isinstance(layer, Serial):
            return Serial(tuple(walk(c) for c in layer.children))
        if isinstance(layer, Parallel):
            return Parallel(tuple(walk(c) for c in layer.children))
        if isinstance(layer, Dense):
            return Dense(max(1, round(layer.width * factor)), layer.w_std, layer.b_std)
        if isinstance(layer, Conv):
            return Conv(max(1, round(layer.channels * factor)), layer.filter_shape,
                        layer.strides, layer.padding, layer.w_std, layer.b_std)
        return layer
    return NetSpec(walk(spec.root), spec.input_shape)


# ---------------------------------------------------------------------------
# JSON serialization

_SIMPLE_OPS = {
    "erf": Erf, "identity": Identity, "flatten": Flatten,
    "global_avg_pool": GlobalAvgPool, "fan_in_sum": FanInSum,
}


def spec_to_json(spec: NetSpec) -> str:
    return json.dumps(
        {"input_shape": list(spec.input_shape), "net": _layer_to_obj(spec.root)},
        indent=2)


def _layer_to_obj(layer):
    if isinstance(layer, Serial):
        return {"op": "serial", "children": [_layer_to_obj(c) for c in layer.children]}
    if isinstance(layer, Parallel):
        return {"op": "parallel", "children": [_layer_to_obj(c) for c in layer.children]}
    if isinstance(layer, Dense):
        return {"op": "dense", "width": layer.width,
                "w_std": layer.w_std, "b_std": layer.b_std}
    if isinstance(layer, Conv):
        return {"op": "conv", "channels": layer.channels,
                "filter_shape": list(layer.filter_shape),
                "strides": list(layer.strides), "padding": layer.padding,
                "w_std": layer.w_std, "b_std": layer.b_std}
    if isinstance(layer, ABRelu):
        return {"op": "ab_relu", "a": layer.a, "b": layer.b}
    if isinstance(layer, AvgPool):
        return {"op": "avg_pool", "window": list(layer.window),
                "strides": list(layer.strides), "padding": layer.padding}
    if isinstance(layer, Dropout):
        return {"op": "dropout", "rate": layer.rate}
    if isinstance(layer, FanOut):
        return {"op": "fan_out", "n": layer.n}
    for name, cls in _SIMPLE_OPS.items():
        if isinstance(layer, cls):
            return {"op": name}
    raise TypeError(f"cannot serialize {type(layer).__name__}")


def spec_from_json(text: str) -> NetSpec:
    obj = json.loads(text)
    try:
        input_shape = tuple(obj["input_shape"])
        root = _layer_from_obj(obj["net"])
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed architecture JSON: {e}") from e
    return NetSpec(root=root, input_shape=input_shape)


def _layer_from_obj(obj):
    op = obj["op"]
    if op == "serial":
        return Serial(tuple(_layer_from_obj(c) for c in obj["children"]))
    if op == "parallel":
        return Parallel(tuple(_layer_from_obj(c) for c in obj["children"]))
    if op == "dense":
        return Dense(width=int(obj["width"]),
                     w_std=float(obj.get("w_std", 1.0)),
                     b_std=float(obj.get("b_std", 0.0)))
    if op == "conv":
        return Conv(channels=int(obj["channels"]),
                    filter_shape=tuple(obj.get("filter_shape", (3, 3))),
                    strides=tuple(obj.get("strides", (1, 1))),
                    padding=obj.get("padding", "SAME"),
                    w_std=float(obj.get("w_std", 1.0)),
                    b_std=float(obj.get("b_std", 0.0)))
    # The ReLU family canonicalizes to ABRelu at parse time.
    if op == "relu":
        return relu()
    if op == "abs":
        return abs_nonlin()
    if op == "leaky_relu":
        return leaky_relu(float(obj["alpha"]))
    if op == "ab_relu":
        return ABRelu(float(obj["a"]), float(obj["b"]))
    if op == "avg_pool":
        return AvgPool(window=tuple(obj["window"]),
                       strides=tuple(obj.get("strides", (1, 1))),
                       padding=obj.get("padding", "VALID"))
    if op == "dropout":
        return Dropout(rate=float(obj["rate"]))
    if op == "fan_out":
        return FanOut(n=int(obj["n"]))
    if op in _SIMPLE_OPS:
        return _SIMPLE_OPS[op]()
    raise ValueError(f"unknown op {op!r}")
