"""Roofline latency model for sequential decoding.

Per-token component latency is max(compute time, memory time) times an
invocation multiplier. Accumulated latency sums per-token totals over
all emitted positions, interpolating component latencies linearly in
context length between anchors (flat beyond the anchor range). The
"w/o FM head" column and the FM-only column are accumulated separately,
so their sum reproduces the full total exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MS = 1e3


@dataclass(frozen=True)
class HardwareSpec:
    flops_per_s: float
    bytes_per_s: float

    def __post_init__(self):
        if self.flops_per_s <= 0 or self.bytes_per_s <= 0:
            raise ValueError("hardware rates must be strictly positive")


H100 = HardwareSpec(flops_per_s=983e12, bytes_per_s=3.36e12)


@dataclass(frozen=True)
class ComponentCost:
    """Affine-in-context cost model for one component at batch 1:
    flops(L) = flops_base + flops_per_ctx * L, same for bytes."""

    name: str
    params: float
    flops_base: float
    flops_per_ctx: float = 0.0
    bytes_base: float = 0.0
    bytes_per_ctx: float = 0.0
    multiplier: float = 1.0

    def __post_init__(self):
        for f in ("params", "flops_base", "flops_per_ctx", "bytes_base",
                  "bytes_per_ctx", "multiplier"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")

    def flops(self, context_len: int) -> float:
        return self.flops_base + self.flops_per_ctx * context_len

    def bytes_moved(self, context_len: int) -> float:
        return self.bytes_base + self.bytes_per_ctx * context_len


def per_token_latency(component: ComponentCost, hw: HardwareSpec,
                      context_len: int) -> float:
    """Roofline milliseconds for one emitted token at the given context."""
    if context_len < 1:
        raise ValueError(f"context_len must be >= 1, got {context_len}")
    seconds = max(
        component.flops(context_len) / hw.flops_per_s,
        component.bytes_moved(context_len) / hw.bytes_per_s,
    )
    return seconds * component.multiplier * MS


@dataclass(frozen=True)
class LatencyAnchor:
    context_len: int
    llm_ms: float
    lmhead_ms: float
    fmhead_ms: float

    @property
    def total_ms(self) -> float:
        return self.llm_ms + self.lmhead_ms + self.fmhead_ms


REFERENCE_ANCHORS = (
    LatencyAnchor(256, 7.20, 0.40, 3.40),
    LatencyAnchor(1024, 7.23, 0.40, 3.40),
    LatencyAnchor(4096, 7.39, 0.40, 3.40),
)


@dataclass(frozen=True)
class LatencyRow:
    context_len: int
    llm_ms: float
    lmhead_ms: float
    fmhead_ms: float
    total_ms: float
    accum_s: float
    accum_wo_fm_s: float


@dataclass(frozen=True)
class LatencyProfile:
    rows: tuple[LatencyRow, ...]

    def to_csv(self) -> str:
        lines = ["context_len,llm_ms,lmhead_ms,fmhead_ms,total_ms,accum_s,accum_wo_fm_s"]
        for r in self.rows:
            lines.append(
                f"{r.context_len},{r.llm_ms!r},{r.lmhead_ms!r},{r.fmhead_ms!r},"
                f"{r.total_ms!r},{r.accum_s!r},{r.accum_wo_fm_s!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "LatencyProfile":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("context_len,"):
            raise ValueError("not a latency CSV")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            rows.append(LatencyRow(
                int(parts[0]), *(float(x) for x in parts[1:7])
            ))
        return cls(tuple(rows))


def accumulate(anchors: list[LatencyAnchor] | tuple[LatencyAnchor, ...],
               lengths: tuple[int, ...] = (256, 1024, 4096)) -> LatencyProfile:
    """LatencyProfile at the requested sequence lengths."""
    if len(anchors) == 0:
        raise ValueError("accumulate needs at least one anchor")
    ctxs = [a.context_len for a in anchors]
    if any(b <= a for a, b in zip(ctxs, ctxs[1:])):
        raise ValueError("anchors must be strictly sorted by context length")
    if any(n < 1 for n in lengths):
        raise ValueError("every requested length must be >= 1")

    n_max = max(lengths)
    positions = np.arange(1, n_max + 1, dtype=np.float64)
    xs = np.array(ctxs, dtype=np.float64)
    llm = np.interp(positions, xs, [a.llm_ms for a in anchors])
    lmh = np.interp(positions, xs, [a.lmhead_ms for a in anchors])
    fmh = np.interp(positions, xs, [a.fmhead_ms for a in anchors])
    accum_others = np.cumsum(llm + lmh) / MS
    accum_fm = np.cumsum(fmh) / MS

    rows = []
    for n in lengths:
        i = n - 1
        rows.append(LatencyRow(
            context_len=n,
            llm_ms=float(llm[i]),
            lmhead_ms=float(lmh[i]),
            fmhead_ms=float(fmh[i]),
            total_ms=float(llm[i] + lmh[i] + fmh[i]),
            accum_s=float(accum_others[i] + accum_fm[i]),
            accum_wo_fm_s=float(accum_others[i]),
        ))
    return LatencyProfile(tuple(rows))


def parse_anchor_csv(text: str) -> tuple[LatencyAnchor, ...]:
    """`context_len,llm_ms,lmhead_ms,fmhead_ms` with a header row."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("context_len"):
        raise ValueError("anchor CSV must start with a context_len header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append(LatencyAnchor(int(parts[0]), float(parts[1]),
                                 float(parts[2]), float(parts[3])))
    return tuple(out)


@dataclass(frozen=True)
class FittedDecoder:
    """Least-squares fit of an affine bytes model to latency anchors,
    decomposed as weight reads + KV reads + residual overhead."""

    cost: ComponentCost
    weight_bytes: float
    kv_bytes_per_ctx: float
    residual_bytes: float
    residuals_ms: tuple[float, ...]

    def describe(self) -> str:
        lines = [
            f"fitted decoder cost model ({self.cost.name}):",
            f"  weight bytes          {self.weight_bytes:.4g}",
            f"  kv bytes per context  {self.kv_bytes_per_ctx:.4g}",
            f"  residual bytes        {self.residual_bytes:.4g}",
            "  anchor residuals (ms): "
            + ", ".join(f"{r:+.4f}" for r in self.residuals_ms),
        ]
        return "\n".join(lines)


def fit_decoder_cost(params: float, hw: HardwareSpec,
                     anchors: tuple[LatencyAnchor, ...] = REFERENCE_ANCHORS,
                     bytes_per_param: float = 1.0) -> FittedDecoder:
    """Fit bytes(L) = base + slope*L to the anchors' decoder column and
    attribute base = params*bytes_per_param + residual. The model is
    memory-bound at batch 1, so FLOPs are set at 2*params per token."""
    xs = np.array([a.context_len for a in anchors], dtype=np.float64)
    target_bytes = np.array([a.llm_ms for a in anchors]) / MS * hw.bytes_per_s
    design = np.stack([np.ones_like(xs), xs], axis=1)
    (base, slope), *_ = np.linalg.lstsq(design, target_bytes, rcond=None)
    weight_bytes = params * bytes_per_param
    cost = ComponentCost(
        name="llm_decoder",
        params=params,
        flops_base=2.0 * params,
        bytes_base=float(base),
        bytes_per_ctx=float(max(slope, 0.0)),
    )
    fitted_ms = np.array(
        [per_token_latency(cost, hw, int(x)) for x in xs]
    )
    residuals = tuple(float(f - a.llm_ms) for f, a in zip(fitted_ms, anchors))
    return FittedDecoder(
        cost=cost,
        weight_bytes=weight_bytes,
        kv_bytes_per_ctx=float(max(slope, 0.0)),
        residual_bytes=float(base - weight_bytes),
        residuals_ms=residuals,
    )
