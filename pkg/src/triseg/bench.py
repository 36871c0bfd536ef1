"""Wall-time benchmarks for the scan kernels plus a quadratic baseline.

The baseline is a naive length-squared similarity accumulation (attention
without the softmax): out_t = sum_s (x_t . x_s) x_s, chunked over queries so
memory stays bounded while the arithmetic stays O(L^2 d).
"""

from __future__ import annotations

import time

import numpy as np

from .ssm import scan_parallel, scan_sequential

BENCH_LANES = 2
BENCH_STATE = 4
BENCH_FEATURE = 2
_BLOCK_ELEMS = 1_000_000


def _time_once(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def quadratic_baseline(x: np.ndarray, block_elems=_BLOCK_ELEMS) -> np.ndarray:
    """out_t = sum_s relu(x_t . x_s) x_s, materializing all pairwise scores.

    Deliberately elementwise (no BLAS dispatch: library threading is too
    erratic for stable small-size timings) with constant-size temporaries so
    every length runs in the same cache regime. The relu keeps the
    accumulation honestly quadratic (no factoring into a d x d Gram matrix).
    """
    L, d = x.shape
    out = np.empty_like(x)
    chunk = max(1, block_elems // L)
    for lo in range(0, L, chunk):
        hi = min(L, lo + chunk)
        scores = (x[lo:hi, None, :] * x[None, :, :]).sum(-1)  # (c, L)
        np.maximum(scores, 0.0, out=scores)
        out[lo:hi] = (scores[:, :, None] * x[None, :, :]).sum(1)
    return out


def _scan_instance(rng, length):
    a = rng.uniform(0.2, 0.999, (length, BENCH_LANES, BENCH_STATE))
    b = rng.standard_normal((length, BENCH_LANES, BENCH_STATE))
    c = rng.standard_normal((length, BENCH_STATE))
    x = rng.standard_normal((length, BENCH_LANES))
    return a, b, c, x


def bench_scan(lengths, repeats=5, seed=0, include_quadratic=True):
    """Per-length median timings in ms; returns rows of dicts.

    Columns: length, sequential_ms, parallel_ms (+ quadratic_ms). Timing
    rounds are interleaved across lengths so machine-wide drift hits every
    length alike and cancels out of doubling ratios.
    """
    rng = np.random.default_rng(seed)
    lengths = [int(v) for v in lengths]
    work = {}
    for length in lengths:
        a, b, c, x = _scan_instance(rng, length)
        # f32 keeps the bandwidth-bound baseline inside the runtime budget
        q = rng.standard_normal((length, BENCH_FEATURE)).astype(np.float32) if include_quadratic else None
        work[length] = (a, b, c, x, q)
        scan_parallel(a, b, c, x)  # warm caches before any measurement
        scan_sequential(a, b, c, x)
        # no quadratic warmup: the elementwise path has no first-run jit/cache
        # effect worth 13s at the largest length, and medians absorb outliers
    samples = {length: {"sequential_ms": [], "parallel_ms": [], "quadratic_ms": []} for length in lengths}
    for _ in range(repeats):
        for length in lengths:
            a, b, c, x, q = work[length]
            samples[length]["sequential_ms"].append(_time_once(lambda: scan_sequential(a, b, c, x)))
            samples[length]["parallel_ms"].append(_time_once(lambda: scan_parallel(a, b, c, x)))
            if include_quadratic:
                samples[length]["quadratic_ms"].append(_time_once(lambda: quadratic_baseline(q)))
    rows = []
    for length in lengths:
        row = {"length": length}
        for col in ("sequential_ms", "parallel_ms", "quadratic_ms"):
            if samples[length][col]:
                row[col] = 1e3 * float(np.median(samples[length][col]))
        rows.append(row)
    return rows


def doubling_ratios(rows, column):
    """t(2L)/t(L) for consecutive length-doubling rows."""
    ratios = []
    for prev, cur in zip(rows, rows[1:]):
        if cur["length"] == 2 * prev["length"]:
            ratios.append(cur[column] / prev[column])
    return ratios


def check_scaling(rows, scan_max_ratio=2.5, quad_min_ratio=3.5):
    """Raises AssertionError when scaling violates the linear/quadratic splits."""
    scan_ratios = doubling_ratios(rows, "parallel_ms")
    if not scan_ratios:
        raise ValueError("need consecutive doubling lengths to check scaling")
    for r in scan_ratios:
        assert r <= scan_max_ratio, f"parallel scan doubling ratio {r:.2f} > {scan_max_ratio}"
    if "quadratic_ms" in rows[0]:
        for r in doubling_ratios(rows, "quadratic_ms"):
            assert r >= quad_min_ratio, f"quadratic baseline doubling ratio {r:.2f} < {quad_min_ratio}"
    return scan_ratios
