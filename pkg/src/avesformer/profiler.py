"""Analytic FLOP/parameter accounting and wall-clock latency measurement.

Cost graphs are lists of :class:`OpCost` built from configuration alone (no
tensors are touched), so they can be checked against :func:`tensor.count_ops`,
which tallies what the ops report while actually running.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .decoder import CONV, DecoderLayout, RepBlockParams, WORKING_STRIDE

FLOP_FORMULAS: dict[str, Callable[..., int]] = {
    "matmul": lambda m, k, n: 2 * m * k * n,
    "conv2d": lambda c_out, c_in, k, h, w: 2 * c_out * c_in * k * k * h * w,
    "softmax": lambda n, m: 5 * n * m,
    "layer_norm": lambda elements: 8 * elements,
    "elementwise": lambda elements: elements,
    "resize": lambda elements: 7 * elements,
}


@dataclass(frozen=True)
class OpCost:
    kind: str
    dims: tuple[int, ...]
    name: str = ""


def count_flops(graph: Iterable[OpCost]) -> int:
    total = 0
    for op in graph:
        formula = FLOP_FORMULAS.get(op.kind)
        if formula is None:
            raise ValueError(f"unmodeled op {op.kind!r} ({op.name or 'unnamed'})")
        total += formula(*op.dims)
    return total


# ---------------------------------------------------------------------------
# cost graphs
# ---------------------------------------------------------------------------


def linear_graph(m: int, k: int, n: int, name: str, bias: bool = True) -> list[OpCost]:
    g = [OpCost("matmul", (m, k, n), name)]
    if bias:
        g.append(OpCost("elementwise", (m * n,), f"{name}.bias"))
    return g


def mha_graph(n: int, m: int, dim: int, heads: int, projections: bool = True, name: str = "mha") -> list[OpCost]:
    dh = dim // heads
    g: list[OpCost] = []
    if projections:
        g += linear_graph(n, dim, dim, f"{name}.q")
        g += linear_graph(m, dim, dim, f"{name}.k")
        g += linear_graph(m, dim, dim, f"{name}.v")
    for h in range(heads):
        g += [
            OpCost("matmul", (n, dh, m), f"{name}.head{h}.logits"),
            OpCost("elementwise", (n * m,), f"{name}.head{h}.scale"),
            OpCost("softmax", (n, m), f"{name}.head{h}.softmax"),
            OpCost("matmul", (n, m, dh), f"{name}.head{h}.mix"),
        ]
    if projections:
        g += linear_graph(n, dim, dim, f"{name}.out")
    return g


def ffn_graph(t: int, dim: int, ratio: int = 4, name: str = "ffn") -> list[OpCost]:
    hidden = ratio * dim
    return (
        linear_graph(t, dim, hidden, f"{name}.fc1")
        + [OpCost("elementwise", (t * hidden,), f"{name}.relu")]
        + linear_graph(t, hidden, dim, f"{name}.fc2")
    )


def pqg_graph(num_queries: int, dim: int, num_layers: int, heads: int) -> list[OpCost]:
    t = num_queries + 1
    g: list[OpCost] = []
    for i in range(num_layers):
        name = f"pqg.layer{i}"
        g.append(OpCost("layer_norm", (t * dim,), f"{name}.norm_attn"))
        g += mha_graph(t, t, dim, heads, name=f"{name}.attn")
        g.append(OpCost("elementwise", (t * dim,), f"{name}.residual_attn"))
        g.append(OpCost("layer_norm", (t * dim,), f"{name}.norm_ffn"))
        g += ffn_graph(t, dim, name=f"{name}.ffn")
        g.append(OpCost("elementwise", (t * dim,), f"{name}.residual_ffn"))
    g.append(OpCost("layer_norm", (t * dim,), "pqg.norm_out"))
    return g


def conv_stage_graph(dim: int, h: int, w: int, fused: bool = True, identity: bool = True, name: str = "conv") -> list[OpCost]:
    e = dim * h * w
    g = [OpCost("conv2d", (dim, dim, 3, h, w), f"{name}.rep3x3")]
    if not fused:
        g += [OpCost("conv2d", (dim, dim, 1, h, w), f"{name}.rep1x1"), OpCost("elementwise", (e,), f"{name}.sum1x1")]
        if identity:
            g.append(OpCost("elementwise", (e,), f"{name}.sum_identity"))
    g += [OpCost("elementwise", (e,), f"{name}.residual"), OpCost("layer_norm", (e,), f"{name}.norm")]
    return g


def attn_stage_graph(n: int, num_queries: int, dim: int, heads: int, name: str = "attn") -> list[OpCost]:
    e = n * dim
    return (
        mha_graph(n, num_queries, dim, heads, name=f"{name}.ca")
        + [OpCost("elementwise", (e,), f"{name}.residual_attn"), OpCost("layer_norm", (e,), f"{name}.norm_attn")]
        + ffn_graph(n, dim, name=f"{name}.ffn")
        + [OpCost("elementwise", (e,), f"{name}.residual_ffn"), OpCost("layer_norm", (e,), f"{name}.norm_ffn")]
    )


def merge_graph(channels: Sequence[int], height: int, width: int, dim: int) -> list[OpCost]:
    h, w = height // WORKING_STRIDE, width // WORKING_STRIDE
    g: list[OpCost] = []
    for i, c in enumerate(channels, start=1):
        s = 2 ** (i + 1)
        hi, wi = height // s, width // s
        g.append(OpCost("conv2d", (dim, c, 1, hi, wi), f"proj{i}"))
        if (hi, wi) != (h, w):
            g.append(OpCost("resize", (dim * h * w,), f"proj{i}.resize"))
        if i > 1:
            g.append(OpCost("elementwise", (dim * h * w,), f"proj{i}.sum"))
    return g


def mask_head_graph(dim: int, h: int, w: int, height: int, width: int) -> list[OpCost]:
    g = [OpCost("conv2d", (1, dim, 1, h, w), "mask.conv")]
    if (h, w) != (height, width):
        g.append(OpCost("resize", (height * width,), "mask.resize"))
    g.append(OpCost("elementwise", (height * width,), "mask.logistic"))
    return g


def decoder_graph(
    layout: DecoderLayout,
    channels: Sequence[int],
    height: int,
    width: int,
    dim: int,
    num_queries: int,
    heads: int,
    fused: bool = True,
) -> list[OpCost]:
    h, w = height // WORKING_STRIDE, width // WORKING_STRIDE
    g = merge_graph(channels, height, width, dim)
    for i, kind in enumerate(layout.stages, start=1):
        if kind == CONV:
            g += conv_stage_graph(dim, h, w, fused, name=f"stage{i}")
        else:
            g += attn_stage_graph(h * w, num_queries, dim, heads, name=f"stage{i}")
    return g


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------


def count_params(component: Any) -> int:
    """Number of stored parameters; fused RepBlocks count only their fused kernel."""
    if isinstance(component, np.ndarray):
        return int(component.size)
    if isinstance(component, RepBlockParams) and component.is_fused:
        return count_params(component.fused_w) + count_params(component.fused_b)
    if dataclasses.is_dataclass(component) and not isinstance(component, type):
        return sum(count_params(getattr(component, f.name)) for f in dataclasses.fields(component))
    if isinstance(component, (list, tuple)):
        return sum(count_params(c) for c in component)
    return 0


def mha_param_count(dim: int) -> int:
    return 4 * (dim * dim + dim)


def ffn_param_count(dim: int, ratio: int = 4) -> int:
    hidden = ratio * dim
    return dim * hidden + hidden + hidden * dim + dim


def pqg_param_count(num_queries: int, dim: int, num_layers: int) -> int:
    per_layer = 2 * dim + mha_param_count(dim) + 2 * dim + ffn_param_count(dim)
    return num_queries * dim + num_layers * per_layer + 2 * dim


def conv_stage_param_count(dim: int, fused: bool = True) -> int:
    branches = dim * dim * 9 + dim if fused else dim * dim * 9 + dim + dim * dim + dim
    return branches + 2 * dim


def attn_stage_param_count(dim: int) -> int:
    return mha_param_count(dim) + 2 * dim + ffn_param_count(dim) + 2 * dim


def merge_param_count(channels: Sequence[int], dim: int) -> int:
    return sum(dim * c + dim for c in channels)


def mask_head_param_count(dim: int) -> int:
    return dim + 1


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyStats:
    median: float
    p25: float
    p75: float
    runs: int
    inner: int = 1
    samples: tuple[float, ...] = field(default=(), repr=False)


def latency_stats(samples_ms: Sequence[float], inner: int = 1) -> LatencyStats:
    arr = np.asarray(samples_ms, dtype=np.float64)
    p25, med, p75 = np.percentile(arr, [25, 50, 75])
    return LatencyStats(float(med), float(p25), float(p75), len(arr), inner, tuple(arr.tolist()))


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=1)


class _Sink:
    """Holds every measured result so no call can be treated as dead."""

    def __init__(self) -> None:
        self.last = None
        self.count = 0

    def consume(self, value) -> None:
        self.last = value
        self.count += 1


MIN_SAMPLE_MS = 1.0
TARGET_SAMPLE_MS = 10.0


def bench_latency(fn: Callable[[], Any], warmup: int = 10, runs: int = 30) -> LatencyStats:
    """Median and quartiles of ``fn()`` wall time in milliseconds.

    Calls shorter than 1 ms are repeated in an inner loop so each sample spans
    at least 10 ms; reported times are per call.
    """
    if runs < 3:
        raise ValueError("runs must be >= 3")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    sink = _Sink()
    limiter = _limit_threads()
    try:
        for _ in range(warmup):
            sink.consume(fn())
        t0 = time.perf_counter_ns()
        sink.consume(fn())
        probe_ms = (time.perf_counter_ns() - t0) / 1e6
        inner = 1
        if probe_ms < MIN_SAMPLE_MS:
            inner = max(1, math.ceil(TARGET_SAMPLE_MS / max(probe_ms, 1e-4)))
        samples = []
        for _ in range(runs):
            t0 = time.perf_counter_ns()
            for _ in range(inner):
                sink.consume(fn())
            samples.append((time.perf_counter_ns() - t0) / 1e6 / inner)
    finally:
        if limiter is not None:
            limiter.unregister()
    return latency_stats(samples, inner)


# ---------------------------------------------------------------------------
# runtime breakdown
# ---------------------------------------------------------------------------


@dataclass
class Step:
    """A named pipeline component: ``fn`` maps the running state to the next state."""

    name: str
    fn: Callable[[Any], Any]
    flops: int = 0
    params: int = 0


@dataclass(frozen=True)
class ProfileEntry:
    component: str
    flops: int
    params: int
    wall_ms: LatencyStats
    percent: float


@dataclass
class ProfileReport:
    entries: list[ProfileEntry]
    title: str = ""

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_ms(self) -> float:
        return sum(e.wall_ms.median for e in self.entries)

    def entry(self, component: str) -> ProfileEntry:
        for e in self.entries:
            if e.component == component:
                return e
        raise KeyError(component)

    CSV_COLUMNS = ("component", "flops", "params", "wall_ms_median", "wall_ms_p25", "wall_ms_p75", "percent")

    def rows(self) -> list[list[str]]:
        return [
            [
                e.component,
                str(e.flops),
                str(e.params),
                f"{e.wall_ms.median:.4f}",
                f"{e.wall_ms.p25:.4f}",
                f"{e.wall_ms.p75:.4f}",
                f"{e.percent:.2f}",
            ]
            for e in self.entries
        ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            writer.writerows(self.rows())

    def to_text(self) -> str:
        table = [list(self.CSV_COLUMNS)] + self.rows()
        widths = [max(len(r[i]) for r in table) for i in range(len(self.CSV_COLUMNS))]
        lines = []
        if self.title:
            lines.append(self.title)
        for r in table:
            cells = [r[0].ljust(widths[0])] + [c.rjust(wd) for c, wd in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells))
        lines.append(f"total: {self.total_flops} FLOPs, {self.total_params} params, {self.total_ms:.3f} ms")
        return "\n".join(lines)


def runtime_breakdown(steps: Sequence[Step], initial, runs: int = 30, warmup: int = 3, title: str = "") -> ProfileReport:
    """Time every component of a sequential pipeline with its own timer."""
    if not steps:
        raise ValueError("pipeline has no components")
    if runs < 3:
        raise ValueError("runs must be >= 3")
    sink = _Sink()
    samples: dict[str, list[float]] = {s.name: [] for s in steps}
    limiter = _limit_threads()
    try:
        for r in range(warmup + runs):
            state = initial
            for s in steps:
                t0 = time.perf_counter_ns()
                state = s.fn(state)
                dt = (time.perf_counter_ns() - t0) / 1e6
                if r >= warmup:
                    samples[s.name].append(dt)
            sink.consume(state)
    finally:
        if limiter is not None:
            limiter.unregister()
    stats = {name: latency_stats(v) for name, v in samples.items()}
    total = sum(st.median for st in stats.values())
    entries = [
        ProfileEntry(
            s.name,
            s.flops,
            s.params,
            stats[s.name],
            100.0 * stats[s.name].median / total if total > 0 else 100.0 / len(steps),
        )
        for s in steps
    ]
    return ProfileReport(entries, title)

