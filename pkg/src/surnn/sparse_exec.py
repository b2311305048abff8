"""Mask-aware GRU execution that skips the rows of inactive units.

Dense and sparse modes run the same per-row kernels in the same inner-product
order; the sparse mode only visits fewer rows, so its output equals the dense
output followed by masking, bit for bit.  Columns are never skipped: active
rows still read the whole previous state.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .cells import GruParams

HEADS = ("reset", "update", "candidate", "combine")


@njit(cache=True)
def _gate_rows(rows, off, W_ih, W_hh, b_ih, b_hh, x, h, out):
    D = x.shape[0]
    H = h.shape[0]
    for k in range(rows.shape[0]):
        i = rows[k]
        acc = b_ih[off + i]
        for j in range(D):
            acc += W_ih[off + i, j] * x[j]
        acc_h = b_hh[off + i]
        for j in range(H):
            acc_h += W_hh[off + i, j] * h[j]
        out[i] = 1.0 / (1.0 + math.exp(-(acc + acc_h)))


@njit(cache=True)
def _candidate_rows(rows, off, W_ih, W_hh, b_ih, b_hh, x, h, r, out):
    D = x.shape[0]
    H = h.shape[0]
    for k in range(rows.shape[0]):
        i = rows[k]
        acc = b_ih[off + i]
        for j in range(D):
            acc += W_ih[off + i, j] * x[j]
        acc_h = b_hh[off + i]
        for j in range(H):
            acc_h += W_hh[off + i, j] * h[j]
        out[i] = math.tanh(acc + r[i] * acc_h)


@njit(cache=True)
def _combine_rows(rows, h, z, n, out):
    for k in range(rows.shape[0]):
        i = rows[k]
        out[i] = h[i] + z[i] * (n[i] - h[i])


@dataclass
class KernelParams:
    """Contiguous GRU weights in the execution dtype."""

    W_ih: np.ndarray
    W_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray

    @property
    def H(self) -> int:
        return self.W_hh.shape[1]

    @property
    def D(self) -> int:
        return self.W_ih.shape[1]

    @property
    def dtype(self):
        return self.W_ih.dtype


def prepare(params: GruParams, dtype=np.float64) -> KernelParams:
    c = lambda a: np.ascontiguousarray(a, dtype=dtype)
    return KernelParams(c(params.W_ih), c(params.W_hh), c(params.b_ih), c(params.b_hh))


def _as_kernel(params, dtype=None) -> KernelParams:
    if isinstance(params, KernelParams):
        return params
    return prepare(params, np.float64 if dtype is None else dtype)


@dataclass
class OpCounter:
    """Multiply-accumulate counts per head plus gathered rows and active-set sizes."""

    macs: dict = field(default_factory=lambda: {k: 0 for k in HEADS})
    gathered_rows: int = 0
    active_sizes: list = field(default_factory=list)

    def record(self, n_active: int, D: int, H: int) -> None:
        per_head = n_active * (D + H)
        self.macs["reset"] += per_head
        self.macs["update"] += per_head
        self.macs["candidate"] += per_head
        self.macs["combine"] += n_active
        self.gathered_rows += 3 * n_active
        self.active_sizes.append(n_active)

    @property
    def total(self) -> int:
        return sum(self.macs.values())

    def merge(self, other: "OpCounter") -> "OpCounter":
        out = OpCounter({k: self.macs[k] + other.macs[k] for k in HEADS},
                        self.gathered_rows + other.gathered_rows,
                        self.active_sizes + other.active_sizes)
        return out


@dataclass
class BlockGating:
    """Neurons grouped in contiguous blocks of ``size`` that share one gate bit."""

    H: int
    size: int = 16

    def __post_init__(self):
        if self.size < 1 or self.H % self.size:
            raise ValueError(f"H={self.H} is not divisible by block size {self.size}")

    @property
    def n_blocks(self) -> int:
        return self.H // self.size

    def block_of(self) -> np.ndarray:
        return np.arange(self.H) // self.size

    def expand(self, block_mask) -> np.ndarray:
        block_mask = np.asarray(block_mask)
        if block_mask.shape[-1] != self.n_blocks:
            raise ValueError(f"block mask needs {self.n_blocks} entries")
        return np.repeat(block_mask, self.size, axis=-1)


def _active_rows(g, H: int, blocks: BlockGating | None) -> np.ndarray:
    g = np.asarray(g)
    if blocks is not None:
        g = blocks.expand(g)
    if g.shape != (H,):
        raise ValueError(f"gate must have {H} entries")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("gate must be binary")
    return np.flatnonzero(g).astype(np.int64)


class _Workspace:
    def __init__(self, H, dtype):
        self.r = np.zeros(H, dtype=dtype)
        self.z = np.zeros(H, dtype=dtype)
        self.n = np.zeros(H, dtype=dtype)


def _run_rows(kp: KernelParams, h, x, rows, ws: _Workspace, out, timer=None):
    H = kp.H
    if timer is None:
        _gate_rows(rows, 0, kp.W_ih, kp.W_hh, kp.b_ih, kp.b_hh, x, h, ws.r)
        _gate_rows(rows, H, kp.W_ih, kp.W_hh, kp.b_ih, kp.b_hh, x, h, ws.z)
        _candidate_rows(rows, 2 * H, kp.W_ih, kp.W_hh, kp.b_ih, kp.b_hh, x, h, ws.r, ws.n)
        _combine_rows(rows, h, ws.z, ws.n, out)
        return
    clock = time.perf_counter
    t0 = clock()
    _gate_rows(rows, 0, kp.W_ih, kp.W_hh, kp.b_ih, kp.b_hh, x, h, ws.r)
    t1 = clock()
    _gate_rows(rows, H, kp.W_ih, kp.W_hh, kp.b_ih, kp.b_hh, x, h, ws.z)
    t2 = clock()
    _candidate_rows(rows, 2 * H, kp.W_ih, kp.W_hh, kp.b_ih, kp.b_hh, x, h, ws.r, ws.n)
    t3 = clock()
    _combine_rows(rows, h, ws.z, ws.n, out)
    t4 = clock()
    timer["reset"] += t1 - t0
    timer["update"] += t2 - t1
    timer["candidate"] += t3 - t2
    timer["combine"] += t4 - t3


def _check(kp: KernelParams, h, x):
    h = np.ascontiguousarray(h, dtype=kp.dtype)
    x = np.ascontiguousarray(x, dtype=kp.dtype)
    if h.shape != (kp.H,) or x.shape != (kp.D,):
        raise ValueError(f"expected h [{kp.H}] and x [{kp.D}], got {h.shape} and {x.shape}")
    return h, x


def dense_step(params, h, x, counter: OpCounter | None = None):
    """Full GRU step through the row kernels. Returns (h_next, counter)."""
    kp = _as_kernel(params)
    h, x = _check(kp, h, x)
    counter = OpCounter() if counter is None else counter
    rows = np.arange(kp.H, dtype=np.int64)
    out = np.empty_like(h)
    _run_rows(kp, h, x, rows, _Workspace(kp.H, kp.dtype), out)
    counter.record(kp.H, kp.D, kp.H)
    return out, counter


def sparse_step(params, h, x, g, blocks: BlockGating | None = None,
                counter: OpCounter | None = None):
    """GRU step for active rows only; inactive coordinates are copied from ``h``."""
    kp = _as_kernel(params)
    h, x = _check(kp, h, x)
    counter = OpCounter() if counter is None else counter
    rows = _active_rows(g, kp.H, blocks)
    out = h.copy()
    _run_rows(kp, h, x, rows, _Workspace(kp.H, kp.dtype), out)
    counter.record(rows.shape[0], kp.D, kp.H)
    return out, counter


def run_stream(params, xs, gs=None, h0=None, blocks: BlockGating | None = None,
               timer: dict | None = None):
    """Run T steps; ``gs`` None means dense. Returns (states [T, H], counter)."""
    kp = _as_kernel(params)
    H = kp.H
    T = len(xs)
    if gs is None:
        row_sets = [np.arange(H, dtype=np.int64)] * T
    else:
        row_sets = [_active_rows(gs[t], H, blocks) for t in range(T)]
    return run_rows(kp, xs, row_sets, h0, timer)


def run_rows(kp: KernelParams, xs, row_sets, h0=None, timer: dict | None = None):
    """Stream execution over precomputed ascending active-row index sets."""
    xs = np.ascontiguousarray(xs, dtype=kp.dtype)
    T = xs.shape[0]
    H = kp.H
    h = np.zeros(H, dtype=kp.dtype) if h0 is None else np.ascontiguousarray(h0, dtype=kp.dtype)
    counter = OpCounter()
    ws = _Workspace(H, kp.dtype)
    states = np.empty((T, H), dtype=kp.dtype)
    for t in range(T):
        rows = row_sets[t]
        out = h.copy()
        _run_rows(kp, h, xs[t], rows, ws, out, timer)
        counter.record(rows.shape[0], kp.D, H)
        states[t] = out
        h = out
    return states, counter


def random_block_masks(rng: np.random.Generator, T: int, n_blocks: int, sparsity: float) -> np.ndarray:
    """[T, n_blocks] masks with exactly round((1 - sparsity) * n_blocks) open blocks per step."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    k = int(round((1.0 - sparsity) * n_blocks))
    masks = np.zeros((T, n_blocks))
    for t in range(T):
        masks[t, rng.permutation(n_blocks)[:k]] = 1.0
    return masks


BENCH_FIELDS = ["mode", "H", "D", "T", "sparsity", "head", "macs", "median_us", "iqr_us"]


def bench(mode: str, H: int, D: int, T: int, sparsity: float, repeats: int = 5,
          dtype=np.float32, block: int = 1, seed: int = 0) -> list[dict]:
    """Per-step wall clock of a T-step stream, median and IQR over ``repeats`` runs.

    Returns one row per head plus a ``total`` row, matching :data:`BENCH_FIELDS`.
    """
    if repeats < 5:
        raise ValueError("bench needs at least 5 repeats")
    if mode not in ("dense", "sparse"):
        raise ValueError("mode must be 'dense' or 'sparse'")
    from .cells import init_gru
    from .numerics import Rng

    kp = prepare(init_gru(Rng(seed), D, H), dtype)
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((T, D)).astype(dtype)
    blocks = BlockGating(H, block)
    if mode == "sparse":
        gs = random_block_masks(rng, T, blocks.n_blocks, sparsity)
        row_sets = [_active_rows(gs[t], H, blocks) for t in range(T)]
    else:
        row_sets = [np.arange(H, dtype=np.int64)] * T
    # warm-up compiles the kernels for this dtype
    run_rows(kp, xs[:2], row_sets[:2])
    per_head = {k: [] for k in HEADS + ("total",)}
    counter = None
    for _ in range(repeats):
        timer = {k: 0.0 for k in HEADS}
        t0 = time.perf_counter()
        _, counter = run_rows(kp, xs, row_sets, timer=timer)
        total = time.perf_counter() - t0
        for k in HEADS:
            per_head[k].append(timer[k] / T * 1e6)
        per_head["total"].append(total / T * 1e6)
    rows = []
    for head, samples in per_head.items():
        q1, med, q3 = np.percentile(samples, [25, 50, 75])
        macs = counter.total if head == "total" else counter.macs[head]
        rows.append({"mode": mode, "H": H, "D": D, "T": T, "sparsity": sparsity, "head": head,
                     "macs": macs, "median_us": float(med), "iqr_us": float(q3 - q1)})
    return rows
