"""Wall-clock latency harness: full depth vs early exit vs monitoring without exits."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .exits import ExitPolicy, infer_batch, infer_corpus, plain_forward
from .metrics import exit_distribution, write_csv

MODES = ("full", "early_exit", "monitored_no_exit")


@dataclass
class BenchResult:
    batch_size: int
    mode: str
    mean_ms: float
    std_ms: float
    warmup_iters: int
    measure_iters: int
    expected_exit_layer: float
    timer_warning: bool = False


def timer_resolution_ns(samples=200):
    """Smallest positive step observed on the monotonic performance counter."""
    best = None
    for _ in range(samples):
        t0 = time.perf_counter_ns()
        t1 = time.perf_counter_ns()
        while t1 == t0:
            t1 = time.perf_counter_ns()
        best = t1 - t0 if best is None else min(best, t1 - t0)
    return best


def _time(fn, batches, warmup, iters):
    for i in range(warmup):
        fn(*batches[i % len(batches)])
    out = np.empty(iters)
    for i in range(iters):
        b = batches[i % len(batches)]
        t0 = time.perf_counter_ns()
        fn(*b)
        out[i] = (time.perf_counter_ns() - t0) / 1e6
    return out


def _batches(tokens, mask, batch_size):
    n = len(tokens)
    if n == 0:
        raise ContractError("benchmark corpus is empty")
    out = []
    for s in range(0, n, batch_size):
        idx = np.arange(s, s + batch_size) % n
        m = mask[idx]
        width = int(m.sum(axis=1).max())
        out.append((tokens[idx][:, :width], m[:, :width]))
    return out


def bench(model, tokens, mask, policy=ExitPolicy(), batch_sizes=(1, 8, 32), warmup=50, iters=200,
          modes=MODES):
    """Time each mode at each batch size; returns (results, speedup rows).

    Batches are trimmed to their longest sample. The batch=1 path truly stops at
    the exit layer; larger batches run until their deepest sample exits.
    """
    resolution = timer_resolution_ns()
    never = policy.with_(l_min=model.num_layers + 1)
    expected = exit_distribution(infer_corpus(model, tokens, mask, policy), model.num_layers).expected_layers
    fns = {"full": lambda t, m: plain_forward(model, t, m),
           "early_exit": lambda t, m: infer_batch(model, t, m, policy),
           "monitored_no_exit": lambda t, m: infer_batch(model, t, m, never)}
    results = []
    for bs in batch_sizes:
        batches = _batches(tokens, mask, bs)
        for mode in modes:
            ms = _time(fns[mode], batches, warmup, iters)
            mean = float(ms.mean())
            low = mean * 1e6 < 10 * resolution
            if low:
                warnings.warn(f"batch {bs} {mode}: mean {mean:.4f} ms is under 10x the timer "
                              f"resolution ({resolution} ns); timings are unreliable")
            results.append(BenchResult(bs, mode, mean, float(ms.std()), warmup, iters, expected, low))
    return results, speedup_table(results, model.num_layers)


def speedup_table(results, num_layers):
    """One row per batch size: full and early-exit latency, speedup, and realized fraction."""
    by = {(r.batch_size, r.mode): r for r in results}
    rows = []
    for bs in sorted({r.batch_size for r in results}):
        full, ee = by.get((bs, "full")), by.get((bs, "early_exit"))
        if full is None or ee is None:
            continue
        mon = by.get((bs, "monitored_no_exit"))
        theory = num_layers / ee.expected_exit_layer
        speedup = full.mean_ms / ee.mean_ms
        rows.append({"batch_size": bs, "full_ms": full.mean_ms, "full_std_ms": full.std_ms,
                     "ee_ms": ee.mean_ms, "ee_std_ms": ee.std_ms,
                     "monitored_ms": mon.mean_ms if mon else float("nan"),
                     "speedup": speedup, "expected_layer": ee.expected_exit_layer,
                     "layer_reduction": theory, "realized_fraction": speedup / theory})
    return rows


def write_bench(results, rows, results_path, table_path):
    write_csv(results, results_path)
    write_csv(rows, table_path)
