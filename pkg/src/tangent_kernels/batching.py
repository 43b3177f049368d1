"""Blocked, multithreaded Gram-matrix assembly.

``batch`` decorates any kernel function (analytic or Monte Carlo) so large
kernels are computed in blocks drawn from a shared queue by worker threads.
Results are written into disjoint regions of preallocated outputs, so the
assembled matrix is identical to the undecorated call whenever the
per-block computation is independent of the plan (true for the analytic
engine, which avoids reduction orders that depend on batch shape).
When the two input batches are the same array, only the upper triangle of
blocks is computed; lower blocks are transposed mirrors.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .kernel_engine import KernelPair
from .netspec import Representation

__all__ = ["Block", "BlockPlan", "plan_blocks", "batch",
           "write_matrix", "read_matrix"]

_MAGIC = b"NTKM"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")  # magic, version, rows, cols


@dataclass(frozen=True)
class Block:
    row0: int
    row1: int
    col0: int
    col1: int
    mirror_of: Optional[tuple[int, int]]  # (row0, col0) of the source block
    worker: int


@dataclass(frozen=True)
class BlockPlan:
    n1: int
    n2: int
    batch_size: int
    symmetric: bool
    blocks: tuple[Block, ...]

    @property
    def computed(self):
        return [b for b in self.blocks if b.mirror_of is None]

    @property
    def mirrored(self):
        return [b for b in self.blocks if b.mirror_of is not None]


def _ranges(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def plan_blocks(n1: int, n2: int, batch_size: int, symmetric: bool,
                n_workers: int = 1) -> BlockPlan:
    """Tiles the n1 x n2 index grid into blocks of at most batch_size.

    With ``symmetric`` (caller asserts identical batches, so n1 == n2 and the
    row/column groups coincide), below-diagonal blocks become mirrors of their
    transposes.  Worker indices are a round-robin hint; execution order is
    decided by the shared queue at run time.
    """
    if batch_size < 1 or n_workers < 1:
        raise ValueError("batch_size and n_workers must be >= 1")
    if symmetric and n1 != n2:
        raise ValueError(f"symmetric plan requires n1 == n2, got {n1} x {n2}")
    rows = _ranges(n1, batch_size)
    cols = _ranges(n2, batch_size)
    blocks = []
    k = 0
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            if symmetric and j < i:
                blocks.append(Block(r0, r1, c0, c1, mirror_of=(c0, r0), worker=-1))
            else:
                blocks.append(Block(r0, r1, c0, c1, mirror_of=None,
                                    worker=k % n_workers))
                k += 1
    return BlockPlan(n1=n1, n2=n2, batch_size=batch_size, symmetric=symmetric,
                     blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# On-disk matrix format


def write_matrix(path, arr) -> None:
    """Writes a 2-D float64 matrix: magic NTKM, u32 version, u64 rows/cols,
    then row-major little-endian doubles."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError(f"NTKM stores 2-D matrices, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_matrix(path, mmap: bool = False):
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    magic, version, rows, cols = _HEADER.unpack(head)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not an NTKM file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported NTKM version {version}")
    if mmap:
        return np.memmap(path, dtype="<f8", mode="r", offset=_HEADER.size,
                         shape=(rows, cols))
    data = np.fromfile(path, dtype="<f8", offset=_HEADER.size)
    return data.reshape(rows, cols)


def _alloc(shape, store_path):
    if store_path is None:
        return np.empty(shape)
    with open(store_path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, shape[0], shape[1]))
        f.truncate(_HEADER.size + 8 * shape[0] * shape[1])
    return np.memmap(store_path, dtype="<f8", mode="r+", offset=_HEADER.size,
                     shape=shape)


# ---------------------------------------------------------------------------
# The batch decorator

_FIELDS = ("nngp", "ntk", "nngp_std_err", "ntk_std_err")


def batch(kernel_fn: Callable, batch_size: int, n_workers: int = 1,
          store_dir: Optional[str] = None) -> Callable:
    """Wraps ``kernel_fn(x1, x2=None, **kw)`` to compute kernels in blocks.

    The wrapper has the identical signature and returns the identical result.
    Worker threads draw blocks from a shared queue; each writes a disjoint
    region of the preallocated output, so no locking is needed.  A failure in
    any block aborts the whole call, tagged with the block coordinates.
    With ``store_dir``, matrices are assembled in NTKM files under that
    directory and returned as writable memory maps.
    """
    if batch_size < 1 or n_workers < 1:
        raise ValueError("batch_size and n_workers must be >= 1")

    def batched(x1, x2=None, **kw):
        x1 = np.asarray(x1)
        symmetric = x2 is None
        x2a = x1 if symmetric else np.asarray(x2)
        plan = plan_blocks(len(x1), len(x2a), batch_size, symmetric, n_workers)

        def run_block(blk: Block):
            rows = x1[blk.row0:blk.row1]
            cols = x2a[blk.col0:blk.col1]
            same = symmetric and blk.row0 == blk.col0
            try:
                return blk, kernel_fn(rows, None if same else cols, **kw)
            except Exception as e:
                raise RuntimeError(
                    f"kernel block rows [{blk.row0}:{blk.row1}] x cols "
                    f"[{blk.col0}:{blk.col1}] failed: {e}") from e

        computed = plan.computed
        if n_workers == 1 or len(computed) == 1:
            results = [run_block(b) for b in computed]
        else:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                futures = [pool.submit(run_block, b) for b in computed]
                done, pending = wait(futures, return_when=FIRST_EXCEPTION)
                err = next((f.exception() for f in done if f.exception()), None)
                if err is not None:
                    for f in pending:
                        f.cancel()
                    raise err
                results = [f.result() for f in futures]

        proto = results[0][1]
        out_shape = (plan.n1, plan.n2)
        arrays = {}
        for name in _FIELDS:
            if getattr(proto, name, None) is not None:
                path = (None if store_dir is None
                        else os.path.join(store_dir, f"{name}.ntkm"))
                arrays[name] = _alloc(out_shape, path)

        var1 = np.empty(plan.n1) if getattr(proto, "var1", None) is not None else None
        var2 = np.empty(plan.n2) if var1 is not None else None
        by_coord = {}
        for blk, res in results:
            by_coord[(blk.row0, blk.col0)] = res
            for name, target in arrays.items():
                target[blk.row0:blk.row1, blk.col0:blk.col1] = getattr(res, name)
            if var1 is not None:
                var1[blk.row0:blk.row1] = res.var1
                var2[blk.col0:blk.col1] = res.var1 if blk.mirror_of is None and \
                    symmetric and blk.row0 == blk.col0 else res.var2
        for blk in plan.mirrored:
            src = by_coord[blk.mirror_of]
            for name, target in arrays.items():
                target[blk.row0:blk.row1, blk.col0:blk.col1] = getattr(src, name).T
        for target in arrays.values():
            if isinstance(target, np.memmap):
                target.flush()

        if isinstance(proto, KernelPair):
            return replace(proto, nngp=arrays["nngp"],
                           ntk=arrays.get("ntk"),
                           var1=var1, var2=var2,
                           representation=Representation.VECTOR,
                           spatial_shape=None, x1_is_x2=symmetric)
        return replace(proto, nngp=arrays.get("nngp"), ntk=arrays.get("ntk"),
                       nngp_std_err=arrays.get("nngp_std_err"),
                       ntk_std_err=arrays.get("ntk_std_err"))

    return batched
