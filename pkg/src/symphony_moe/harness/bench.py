"""Routing-only wall-time comparison of baseline and symphony gating."""

from __future__ import annotations

import gc
import time
from typing import Sequence

import numpy as np

from ..errors import ArgumentError
from ..graph import AdjacencyState, estimate_overhead
from ..router import RouterParams, compute_scores, smoe_gate_softmax_first


def _block_time(fn, inner: int) -> float:
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t0) / inner


def time_pair(base_fn, sym_fn, repetitions: int, min_block_s: float = 5e-3):
    """Median baseline time and median relative overhead of ``sym_fn``.

    Every repetition brackets one symphony block between two baseline blocks
    and compares against their mean, which cancels slow machine drift. Each
    block repeats the call enough times to dwarf timer resolution.
    """
    base_fn(), sym_fn()
    single = max(_block_time(base_fn, 3), 1e-7)
    inner = max(1, int(min_block_s / single))
    tb, ratios = [], []
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            a = _block_time(base_fn, inner)
            s = _block_time(sym_fn, inner)
            b = _block_time(base_fn, inner)
            tb.append(0.5 * (a + b))
            ratios.append(s / tb[-1] - 1.0)
    finally:
        if gc_was:
            gc.enable()
    return float(np.median(tb)), float(np.median(ratios))


def bench_overhead(M_grid: Sequence[int], N_grid: Sequence[int], K: int = 2, repetitions: int = 61,
                   dim: int = 512, seed: int = 0, bypass: bool = False) -> list[dict]:
    """Median wall time of routing-only forward passes with and without adjacency smoothing.

    Symphony routing here is the evaluation path (frozen adjacency, no
    counting). ``bypass`` keeps the adjacency in its bootstrap state so
    smoothing is skipped. Each row carries the analytic overhead estimate
    for one layer.
    """
    if not M_grid or not N_grid:
        raise ArgumentError("benchmark grids must be non-empty")
    rows = []
    for M in M_grid:
        if K > M:
            raise ArgumentError("K exceeds expert count")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(M)]))
        router = RouterParams.init("linear", M, dim, rng)
        counts = rng.random((M, M))
        state = AdjacencyState(M, beta=0.0)
        if not bypass:
            state.accumulator = counts + counts.T
            state.normalize_and_ema()
        state.freeze()
        for N in N_grid:
            x = rng.standard_normal((N, dim))

            def base():
                return smoe_gate_softmax_first(compute_scores(router, x), K)

            def sym():
                return state.symphony_route(compute_scores(router, x), K)

            tb, rel = time_pair(base, sym, repetitions)
            est = estimate_overhead(M, K, N, 1, 4)
            rows.append(dict(
                M=M, K=K, N=N, D=dim, baseline_s=tb, symphony_s=tb * (1.0 + rel), delta_pct=100.0 * rel,
                pred_infer_flops=est.infer_flops, pred_infer_bytes=est.infer_bytes,
                pred_train_flops=est.train_flops, pred_train_bytes=est.train_bytes,
            ))
    return rows


def overhead_trend(rows: list[dict], M: int) -> float:
    """Least-squares slope of delta% against log2 N for one expert count (negative = shrinking)."""
    sel = sorted((r for r in rows if r["M"] == M), key=lambda r: r["N"])
    if len(sel) < 2:
        raise ArgumentError("need at least two sequence lengths for a trend")
    n = np.log2([r["N"] for r in sel])
    d = np.array([r["delta_pct"] for r in sel])
    return float(np.polyfit(n, d, 1)[0])
