"""Scaling benchmark: linear vs dense mixing over growing span graphs.

Random tree-shaped graphs (|edges| = 2(N-1), like real span graphs) feed two
timed regions per size: the full encoder+decoder forward at batch 1, and the
global-mixing stage alone on prebuilt Q/K/V. Graph construction and operator
precomputation stay outside every timed region. Multiply-accumulate counts
for the mixing stage complement wall-clock numbers because desk hardware
varies; the analytic formulas below double exactly with N (linear) and
quadruple exactly (dense).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import numeric_core as nc
from .config import ModelConfig
from .model_train import forward, init_params
from .span_graph import SpanGraph, StageNode
from .spatial_encoder import (GraphOperators, build_operators, dense_global_mix,
                              input_mlp, linear_global_mix, premix, qkv)

DEFAULT_N_SWEEP = (32, 64, 128, 256, 512, 1024)


def linear_mix_macs(n: int, d: int) -> int:
    """Streaming global mix: two N*d*d contractions plus O(N*d) bookkeeping."""
    return 2 * n * d * d + 5 * n * d + 2 * n


def dense_mix_macs(n: int, d: int) -> int:
    """Explicit attention: two N*N*d contractions plus the N*N softmax."""
    return 2 * n * n * d + 5 * n * n


def random_tree_graph(n: int, seed: int = 0) -> SpanGraph:
    """Uniform random recursive tree over n distinct services."""
    rng = np.random.default_rng([seed, n])
    nodes = [StageNode(0, "client", "svc0000")]
    forward_edges = []
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        nodes.append(StageNode(i, nodes[parent].service, f"svc{i:04d}"))
        forward_edges.append((parent, i))
    return SpanGraph(f"bench-{n}", tuple(nodes), tuple(forward_edges))


def _mixing_inputs(cfg: ModelConfig, ops: GraphOperators, params, x):
    h0 = input_mlp(params, nc.as_tensor(x))
    q_n, k_n, v = qkv(params, "enc0", h0)
    k_bar, v_bar = premix(k_n, v, ops, cfg.rho)
    return q_n, k_bar, v_bar


def measured_mixing_macs(variant: str, n: int, d: int, seed: int = 0):
    """(counted multiply-accumulates, largest op output) for one mixing call."""
    cfg = ModelConfig(d=d, mixing=variant)
    graph = random_tree_graph(n, seed)
    ops = build_operators(graph)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, n, 7])
    q_n, k_bar, v_bar = _mixing_inputs(cfg, ops, params, rng.normal(size=(n, cfg.d_in)))
    mix = linear_global_mix if variant == "linear" else dense_global_mix
    with nc.count_ops() as st:
        mix(q_n, k_bar, v_bar)
    return st.macs, st.max_out_elems


@dataclass
class BenchRow:
    variant: str
    n: int
    median_s: float
    mean_s: float
    mix_median_s: float
    mix_mean_s: float
    mix_macs: int


@dataclass
class BenchReport:
    variant: str
    d: int
    repeats: int
    warmups: int
    rows: list[BenchRow] = field(default_factory=list)
    # fitted log-log wall-clock slopes; None for degenerate single-size sweeps
    full_slope: float | None = None
    mix_slope: float | None = None
    full_growth_ratio: float | None = None
    mix_growth_ratio: float | None = None


def _time_region(fn, repeats: int, warmups: int) -> tuple[float, float]:
    for _ in range(warmups):
        fn()
    times = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times[i] = time.perf_counter_ns() - t0
    return float(np.median(times) / 1e9), float(times.mean() / 1e9)


def _loglog_slope(ns, ts) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)),
                            np.log(np.asarray(ts, float)), 1)[0])


def bench_forward(variant: str, n_values=DEFAULT_N_SWEEP, d: int = 32,
                  repeats: int = 1000, warmups: int = 50,
                  seed: int = 0) -> BenchReport:
    """Time the batch-1 forward and the bare mixing stage per graph size."""
    if variant not in ("linear", "dense"):
        raise ValueError(f"unknown variant '{variant}'")
    report = BenchReport(variant, d, repeats, warmups)
    mix = linear_global_mix if variant == "linear" else dense_global_mix
    for n in n_values:
        cfg = ModelConfig(d=d, mixing=variant)
        graph = random_tree_graph(n, seed)
        ops = build_operators(graph)
        params = init_params(cfg, seed)
        rng = np.random.default_rng([seed, n, 7])
        x = rng.normal(size=(1, cfg.L, n, cfg.d_in))
        c = rng.normal(size=(1, cfg.L, cfg.d_c))

        full_med, full_mean = _time_region(
            lambda: forward(params, cfg, ops, x, c), repeats, warmups)

        q_n, k_bar, v_bar = _mixing_inputs(cfg, ops, params, x[0, 0])
        mix_med, mix_mean = _time_region(
            lambda: mix(q_n, k_bar, v_bar), repeats, warmups)

        macs, _ = measured_mixing_macs(variant, n, d, seed)
        report.rows.append(BenchRow(variant, n, full_med, full_mean,
                                    mix_med, mix_mean, macs))
    if len(report.rows) >= 2:
        ns = [r.n for r in report.rows]
        report.full_slope = _loglog_slope(ns, [r.median_s for r in report.rows])
        report.mix_slope = _loglog_slope(ns, [r.mix_median_s for r in report.rows])
        first, last = report.rows[0], report.rows[-1]
        report.full_growth_ratio = last.median_s / first.median_s
        report.mix_growth_ratio = last.mix_median_s / first.mix_median_s
    return report


def write_bench_csv(reports: list[BenchReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "n", "median_s", "mean_s", "mix_median_s",
                    "mix_mean_s", "mix_macs", "full_slope", "mix_slope"])
        for rep in reports:
            for row in rep.rows:
                w.writerow([row.variant, row.n, repr(row.median_s), repr(row.mean_s),
                            repr(row.mix_median_s), repr(row.mix_mean_s), row.mix_macs,
                            "" if rep.full_slope is None else repr(rep.full_slope),
                            "" if rep.mix_slope is None else repr(rep.mix_slope)])
