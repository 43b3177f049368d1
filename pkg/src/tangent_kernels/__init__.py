"""Exact infinite-width network kernels (NNGP and NTK) for compositional
architectures, with finite-width cross-validation and function-space
inference."""

from ._accel import BACKEND
from .netspec import (ABRelu, AvgPool, Conv, Dense, Dropout, Erf, FanInSum,
                      FanOut, Flatten, GlobalAvgPool, Identity, NetSpec,
                      Parallel, Representation, Serial, abs_nonlin,
                      leaky_relu, parallel, plan_representation, relu, serial,
                      spec_from_json, spec_to_json, validate)
from .kernel_engine import KernelPair, kernel_fn

__version__ = "0.1.0"
