"""Complexity accounting and latency benchmarking.

Parameter counts come from closed forms per layer type and must equal the
weight-arena length of a built graph. FLOP counts follow one stated
convention so numbers are comparable within this artifact:

  * conv-family layers (conv, depthwise, pointwise, skip projections):
    2 * k^2 * cin_per_group * Hout * Wout * cout   (1 MAC = 2 FLOPs)
  * dense: 2 * in * out
  * activations, pooling, residual adds, gate multiplies: 1 FLOP per
    output element per elementwise op
  * nearest upsampling: 0 (pure copy)

MACs are the conv+dense half: macs = conv_dense_flops / 2.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MetricError
from .graph import (
    Activation,
    AttnCondenser,
    Conv,
    Dense,
    Depthwise,
    GlobalAvgPool,
    MaxPool,
    Pointwise,
    ResidualBegin,
    ResidualEnd,
    _infer_shapes,
)

__all__ = [
    "ComplexityReport",
    "LatencyStats",
    "count_params",
    "count_flops",
    "netscore",
    "benchmark_latency",
    "analyze",
    "format_table",
    "report_json",
]


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    std_ms: float
    n_runs: int


@dataclass(frozen=True)
class ComplexityReport:
    params: int
    flops: int
    macs: int
    input_shape: tuple
    layers: tuple = ()  # (index, tag, params, flops) rows
    auc: float | None = None
    netscore: float | None = None
    latency: LatencyStats | None = None


def _layer_params(spec, in_shape):
    c = in_shape[0]
    if isinstance(spec, Conv):
        return spec.k * spec.k * c * spec.out_ch + spec.out_ch
    if isinstance(spec, Depthwise):
        return spec.k * spec.k * c + c
    if isinstance(spec, Pointwise):
        return c * spec.out_ch + spec.out_ch
    if isinstance(spec, AttnCondenser):
        return 9 * c + c * c + 2 * c
    if isinstance(spec, Dense):
        return in_shape[0] * in_shape[1] * in_shape[2] * spec.out + spec.out
    if isinstance(spec, ResidualBegin) and spec.proj_out_ch:
        return c * spec.proj_out_ch + spec.proj_out_ch
    return 0


def _layer_flops(spec, in_shape, out_shape):
    """(total_flops, conv_dense_flops) for one layer under the stated convention."""
    c_in, h_in, w_in = in_shape
    c_out, h_out, w_out = out_shape
    if isinstance(spec, Conv):
        f = 2 * spec.k * spec.k * c_in * h_out * w_out * c_out
        return f, f
    if isinstance(spec, Depthwise):
        f = 2 * spec.k * spec.k * h_out * w_out * c_in
        return f, f
    if isinstance(spec, Pointwise):
        f = 2 * c_in * h_out * w_out * c_out
        return f, f
    if isinstance(spec, AttnCondenser):
        hc, wc = h_in // spec.factor, w_in // spec.factor
        pool = c_in * hc * wc
        dw = 2 * 9 * hc * wc * c_in
        pw = 2 * c_in * hc * wc * c_in
        sig = c_in * h_in * w_in
        gates = 2 * c_in * h_in * w_in  # gate multiply + per-channel scale multiply
        return pool + dw + pw + sig + gates, dw + pw
    if isinstance(spec, MaxPool):
        return c_out * h_out * w_out, 0
    if isinstance(spec, GlobalAvgPool):
        return c_out, 0
    if isinstance(spec, Dense):
        fan_in = c_in * h_in * w_in
        f = 2 * fan_in * spec.out
        return f, f
    if isinstance(spec, Activation):
        return c_out * h_out * w_out, 0
    if isinstance(spec, ResidualBegin):
        if spec.proj_out_ch:
            f = 2 * c_in * h_in * w_in * spec.proj_out_ch
            return f, f
        return 0, 0
    if isinstance(spec, ResidualEnd):
        return c_out * h_out * w_out, 0
    return 0, 0


def count_params(graph):
    """Closed-form parameter total; always equals the weight arena length."""
    return sum(_layer_params(spec, shp[0]) for spec, shp in zip(graph.specs, graph.layer_shapes))


def count_flops(graph, input_shape=None):
    """FLOPs for one batch-1 forward at the given (or the graph's) input shape."""
    if input_shape is None:
        input_shape = graph.input_shape
    shapes = _infer_shapes(list(graph.specs), tuple(input_shape))
    return sum(_layer_flops(spec, i, o)[0] for spec, (i, o) in zip(graph.specs, shapes))


def count_macs(graph, input_shape=None):
    """Multiply-accumulate count: half of the conv+dense FLOPs."""
    if input_shape is None:
        input_shape = graph.input_shape
    shapes = _infer_shapes(list(graph.specs), tuple(input_shape))
    cd = sum(_layer_flops(spec, i, o)[1] for spec, (i, o) in zip(graph.specs, shapes))
    return cd // 2


def netscore(auc, params, macs):
    """Omega = 20*log10(a^2 / (p^0.5 * m^0.5)), a = 100*auc, p/m in millions."""
    if params <= 0 or macs <= 0:
        raise MetricError(f"netscore needs positive params and macs, got {params}, {macs}")
    if not 0.0 < auc <= 1.0:
        raise MetricError(f"netscore needs auc in (0, 1], got {auc}")
    a = 100.0 * auc
    p = params / 1e6
    m = macs / 1e6
    return 20.0 * math.log10(a * a / math.sqrt(p * m))


def analyze(graph, input_shape=None, auc=None):
    """Full ComplexityReport (no latency; see benchmark_latency)."""
    if input_shape is None:
        input_shape = graph.input_shape
    shapes = _infer_shapes(list(graph.specs), tuple(input_shape))
    rows = []
    total_flops = 0
    conv_dense = 0
    for i, (spec, (shp_in, shp_out)) in enumerate(zip(graph.specs, shapes)):
        p = _layer_params(spec, shp_in)
        f, cd = _layer_flops(spec, shp_in, shp_out)
        total_flops += f
        conv_dense += cd
        rows.append((i, spec.tag, p, f))
    params = sum(r[2] for r in rows)
    macs = conv_dense // 2
    score = netscore(auc, params, macs) if auc is not None else None
    return ComplexityReport(
        params=params,
        flops=total_flops,
        macs=macs,
        input_shape=tuple(input_shape),
        layers=tuple(rows),
        auc=auc,
        netscore=score,
    )


def benchmark_latency(graph, input_shape=None, n_runs=50, warmup=5, rng_seed=0):
    """Wall-clock per single-image forward, single-threaded, warmup excluded."""
    if n_runs < 1:
        raise ConfigError(f"benchmark needs n_runs >= 1, got {n_runs}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    if input_shape is None:
        input_shape = graph.input_shape
    shape = (1,) + tuple(input_shape[1:])
    x = np.random.default_rng(rng_seed).normal(size=shape)

    from threadpoolctl import threadpool_limits

    times = np.empty(n_runs)
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            graph.forward(x)
        for i in range(n_runs):
            t0 = time.perf_counter()
            graph.forward(x)
            times[i] = time.perf_counter() - t0
    times *= 1e3
    return LatencyStats(
        mean_ms=float(times.mean()),
        median_ms=float(np.median(times)),
        p95_ms=float(np.percentile(times, 95)),
        std_ms=float(times.std()),
        n_runs=n_runs,
    )


# ---------------------------------------------------------------------------
# report rendering

_COLUMNS = ("Model", "NetScore", "Params", "FLOPS", "Latency (ms)", "AUC")


def _fmt_row(name, report):
    return (
        name,
        f"{report.netscore:.2f}" if report.netscore is not None else "-",
        f"{report.params:,}",
        f"{report.flops:,}",
        f"{report.latency.median_ms:.1f}" if report.latency is not None else "-",
        f"{report.auc:.4f}" if report.auc is not None else "-",
    )


def format_table(named_reports):
    """Aligned text table, one row per (name, ComplexityReport) pair."""
    rows = [_COLUMNS] + [_fmt_row(name, rep) for name, rep in named_reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(_COLUMNS))]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_json(report, name=None):
    doc = {
        "params": report.params,
        "flops": report.flops,
        "macs": report.macs,
        "input_shape": list(report.input_shape),
        "flop_convention": "1 MAC = 2 FLOPs; activations/pooling/adds = 1 FLOP per output element",
        "layers": [
            {"index": i, "type": tag, "params": p, "flops": f} for i, tag, p, f in report.layers
        ],
    }
    if name is not None:
        doc["model"] = name
    if report.auc is not None:
        doc["auc"] = report.auc
    if report.netscore is not None:
        doc["netscore"] = report.netscore
    if report.latency is not None:
        doc["latency_ms"] = {
            "mean": report.latency.mean_ms,
            "median": report.latency.median_ms,
            "p95": report.latency.p95_ms,
            "std": report.latency.std_ms,
            "n_runs": report.latency.n_runs,
        }
    return json.dumps(doc, indent=2) + "\n"
