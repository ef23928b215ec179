"""Consolidated run reports.

Emits a stable file layout under an output directory:

    loss.csv  trace.csv  latency.csv  histogram.csv
    samples/NNN.ppm  report.txt

Sections without data are written zeroed (header-only CSVs) so the
layout is identical for every run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .latency import LatencyProfile
from .latents import histogram_to_csv
from .ppm import write_ppm
from .sampler import TokenStatsTrace, drift_report
from .trainer import LossRecord, loss_history_csv

LAYOUT = ("loss.csv", "trace.csv", "latency.csv", "histogram.csv",
          "samples", "report.txt")


@dataclass
class RunArtifacts:
    loss_history: list[LossRecord] = field(default_factory=list)
    trace: TokenStatsTrace | None = None
    latency: LatencyProfile | None = None
    histogram: list[tuple[int, float, float, int]] = field(default_factory=list)
    samples: list[np.ndarray] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def write_report(out_dir: str, artifacts: RunArtifacts) -> list[str]:
    """Write the full layout; returns the files written."""
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    written = []

    def emit(name: str, text: str):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        written.append(path)

    emit("loss.csv", loss_history_csv(artifacts.loss_history))
    if artifacts.trace is not None and len(artifacts.trace):
        emit("trace.csv", artifacts.trace.to_csv())
    else:
        emit("trace.csv", "token_index,mean,variance\n")
    if artifacts.latency is not None:
        emit("latency.csv", artifacts.latency.to_csv())
    else:
        emit("latency.csv",
             "context_len,llm_ms,lmhead_ms,fmhead_ms,total_ms,"
             "accum_s,accum_wo_fm_s\n")
    if artifacts.histogram:
        emit("histogram.csv", histogram_to_csv(artifacts.histogram))
    else:
        emit("histogram.csv", "channel,bin_left,bin_right,count\n")
    for i, image in enumerate(artifacts.samples):
        path = os.path.join(out_dir, "samples", f"{i:03d}.ppm")
        write_ppm(path, image)
        written.append(path)
    emit("report.txt", _summary_text(artifacts))
    return written


def _summary_text(a: RunArtifacts) -> str:
    lines = ["run report", "=" * 10, ""]
    lines.append(f"training steps recorded: {len(a.loss_history)}")
    if a.loss_history:
        first, last = a.loss_history[0], a.loss_history[-1]
        lines.append(f"  total loss {first.total:.6g} -> {last.total:.6g}")
    lines.append(f"generated image tokens traced: "
                 f"{len(a.trace) if a.trace else 0}")
    if a.trace is not None and len(a.trace):
        d = drift_report(a.trace)
        lines.append(f"  max |mean| {d.max_abs_mean:.4f}, "
                     f"max |var-1| {d.max_var_deviation:.4f}, "
                     f"band violations {d.violations}")
    lines.append(f"latency rows: {len(a.latency.rows) if a.latency else 0}")
    lines.append(f"histogram rows: {len(a.histogram)}")
    lines.append(f"sample images: {len(a.samples)}")
    for note in a.notes:
        lines.append("")
        lines.append(note)
    return "\n".join(lines) + "\n"
