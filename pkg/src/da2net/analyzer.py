"""Closed-form parameter/MAC accounting and the throughput benchmark.

Costs are computed from a flat list of :class:`LayerSpec` rows, so full-size
architectures can be analyzed without ever instantiating their weights. The
headline "GFLOPs" figure is giga-MACs (one multiply-accumulate per unit);
elementwise work (BN, activations, pooling, gating, residual adds) is counted
in a separate column and excluded from the headline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attention import POINTWISE_REDUCTION
from .backbone import Network, forward_classify
from .errors import ConfigError
from .tensor import Rng, Tensor

__all__ = [
    "LayerSpec",
    "RowCost",
    "CostReport",
    "ThroughputResult",
    "count_params",
    "count_flops",
    "analyze",
    "grouping_cost_ratio",
    "attention_block_cost",
    "measure_throughput",
]


@dataclass(frozen=True)
class LayerSpec:
    """One primitive of a network description.

    ``hw`` is the spatial extent of the op's output (``(1, 1)`` for ops on
    per-channel vectors); ``None`` marks an unresolved shape, which is fine
    for parameter counting but rejected by MAC counting.
    """

    name: str
    kind: str  # conv2d | bn | act | gap | linear | conv1d | scale | add
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    groups: int = 1
    bias: bool = False
    alpha: int = 0
    in_features: int = 0
    out_features: int = 0
    hw: tuple[int, int] | None = None


@dataclass(frozen=True)
class RowCost:
    name: str
    kind: str
    params: int
    buffers: int
    macs: int
    elementwise: int


@dataclass
class CostReport:
    """Per-layer cost rows plus totals; totals always equal the row sums."""

    rows: list[RowCost]
    baseline: "CostReport | None" = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_buffers(self) -> int:
        return sum(r.buffers for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_elementwise(self) -> int:
        return sum(r.elementwise for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def to_json(self) -> dict:
        out = {
            "layers": [
                {"name": r.name, "kind": r.kind, "params": r.params,
                 "macs": r.macs, "elementwise": r.elementwise}
                for r in self.rows
            ],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "total_elementwise": self.total_elementwise,
            "gflops": self.gflops,
        }
        if self.baseline is not None:
            out["delta_params"] = self.total_params - self.baseline.total_params
            out["delta_macs"] = self.total_macs - self.baseline.total_macs
            out["delta_gflops"] = out["delta_macs"] / 1e9
        return out

    def to_text(self) -> str:
        width = max([len("layer")] + [len(r.name) for r in self.rows])
        lines = [f"{'layer':<{width}}  {'kind':<7} {'params':>12} {'MACs':>14} {'elemwise':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.kind:<7} {r.params:>12} "
                         f"{r.macs:>14} {r.elementwise:>12}")
        lines.append(f"{'TOTAL':<{width}}  {'':<7} {self.total_params:>12} "
                     f"{self.total_macs:>14} {self.total_elementwise:>12}")
        lines.append(f"params: {self.total_params / 1e6:.3f}M   "
                     f"GFLOPs(MACs): {self.gflops:.4f}")
        if self.baseline is not None:
            dp = self.total_params - self.baseline.total_params
            dm = self.total_macs - self.baseline.total_macs
            lines.append(f"vs baseline: params {dp / 1e6:+.3f}M   GFLOPs {dm / 1e9:+.4f}")
        return "\n".join(lines)


def _conv2d_params(s: LayerSpec) -> int:
    p = s.kernel * s.kernel * (s.in_ch // s.groups) * s.out_ch
    return p + (s.out_ch if s.bias else 0)


def _row_cost(s: LayerSpec, with_macs: bool) -> RowCost:
    params = buffers = macs = elementwise = 0
    if s.kind == "conv2d":
        params = _conv2d_params(s)
        if with_macs:
            h, w = _need_hw(s)
            macs = s.kernel * s.kernel * (s.in_ch // s.groups) * s.out_ch * h * w
    elif s.kind == "bn":
        params = 2 * s.out_ch
        buffers = 2 * s.out_ch
        if with_macs:
            h, w = _need_hw(s)
            elementwise = s.out_ch * h * w
    elif s.kind in ("act", "gap", "scale", "add"):
        if with_macs:
            h, w = _need_hw(s)
            elementwise = s.out_ch * h * w
    elif s.kind == "linear":
        params = s.in_features * s.out_features + (s.out_features if s.bias else 0)
        if with_macs:
            macs = s.in_features * s.out_features
    elif s.kind == "conv1d":
        params = s.alpha + (1 if s.bias else 0)
        if with_macs:
            macs = s.alpha * s.out_ch
    else:
        raise ConfigError(f"unknown layer kind {s.kind!r} in row {s.name!r}")
    return RowCost(s.name, s.kind, params, buffers, macs, elementwise)


def _need_hw(s: LayerSpec) -> tuple[int, int]:
    if s.hw is None:
        raise ConfigError(f"unresolved symbolic shape: row {s.name!r} has no spatial extent")
    return s.hw


def count_params(specs) -> CostReport:
    """Parameter (and buffer) counts; spatial extents may be unresolved."""
    return CostReport(rows=[_row_cost(s, with_macs=False) for s in specs])


def count_flops(specs) -> CostReport:
    """Full cost rows including MACs; every spatial extent must be concrete."""
    return CostReport(rows=[_row_cost(s, with_macs=True) for s in specs])


def analyze(specs, baseline_specs=None) -> CostReport:
    report = count_flops(specs)
    if baseline_specs is not None:
        report.baseline = count_flops(baseline_specs)
    return report


def grouping_cost_ratio(n: int, channels: int, g: int) -> Fraction:
    """Exact grouped-vs-standard cost ratio of a channel-preserving conv.

    Parameters and MACs scale identically, so one rational covers both;
    the value is always g / C.
    """
    if channels % g != 0:
        raise ConfigError(f"g={g} does not divide channels C={channels}")
    grouped = n * n * g * channels  # C_in/groups = g when groups = C/g
    standard = n * n * channels * channels
    return Fraction(grouped, standard)


def attention_block_cost(channels: int, hw: tuple[int, int], cfg) -> tuple[int, int, int]:
    """Closed-form (params, MACs, elementwise) of one attention block.

    Per layer with filter n and grouping ratio g: n^2*C*g conv weights +
    2C batch-norm learnables + alpha gate-kernel weights; conv MACs are
    n^2*C*g*H*W, the gate's channel mix adds alpha*C.
    """
    h, w = hw
    params = macs = elementwise = 0
    for layer in cfg.layers:
        if layer.use_pointwise_reduction:
            mid = max(channels // POINTWISE_REDUCTION, 1)
            params += channels * mid * 2
            macs += channels * mid * h * w * 2
            elementwise += mid * h * w  # relu between the 1x1 pair
        else:
            params += layer.n * layer.n * channels * layer.g
            macs += layer.n * layer.n * channels * layer.g * h * w
        params += 2 * channels  # bn
        elementwise += 2 * channels * h * w  # bn + sigmoid
        if cfg.adaptive:
            params += layer.alpha
            macs += layer.alpha * channels
            elementwise += channels * h * w  # gap
            elementwise += channels  # gate sigmoid
            elementwise += channels * h * w  # gate multiply
    return params, macs, elementwise


@dataclass
class ThroughputResult:
    """One benchmark summary; tau is computed from the stored fields."""

    batches: int
    batch_size: int
    elapsed: float  # mean seconds per measurement of `batches` batches
    repeats: int
    spread: float | None  # relative std of per-repeat throughput; None if repeats == 1
    per_run_tau: list[float] = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return self.batches * self.batch_size / self.elapsed

    @property
    def latency(self) -> float:
        return self.elapsed / self.batches

    def to_json(self) -> dict:
        return {
            "batches": self.batches,
            "batch_size": self.batch_size,
            "elapsed_s": self.elapsed,
            "repeats": self.repeats,
            "throughput_ips": self.throughput,
            "latency_s_per_batch": self.latency,
            "spread_rel": self.spread,
        }


def measure_throughput(net: Network, batch_size: int, batches: int = 10,
                       warmup: int = 2, repeats: int = 100,
                       rng: Rng | None = None) -> ThroughputResult:
    """Time eval-mode forward passes with a monotonic clock.

    Runs ``warmup`` untimed batches first, then ``repeats`` measurements of
    ``batches`` timed batches each, reporting the mean elapsed time and the
    relative spread of per-repeat throughput.
    """
    if warmup < 1 or batches < 1 or repeats < 1:
        raise ConfigError("warmup, batches, and repeats must all be >= 1")
    cfg = net.config
    if rng is None:
        rng = Rng(0xBE7C)
    batch = Tensor(rng.uniform((batch_size, cfg.in_channels, cfg.input_size, cfg.input_size)))

    for _ in range(warmup):
        forward_classify(net, batch, mode="eval")

    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(batches):
            forward_classify(net, batch, mode="eval")
        times.append(time.perf_counter() - t0)
    times_arr = np.asarray(times)
    taus = batches * batch_size / times_arr
    spread = float(taus.std() / taus.mean()) if repeats > 1 else None
    return ThroughputResult(batches=batches, batch_size=batch_size,
                            elapsed=float(times_arr.mean()), repeats=repeats,
                            spread=spread, per_run_tau=[float(t) for t in taus])
