"""Scaling-efficiency curves: e = t1 / (n tn) from paired timing CSVs."""

from __future__ import annotations

from dataclasses import dataclass, field

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import PairingError, load_timing_csv


@dataclass
class EfficiencyCurve:
    """Efficiency against particle count for one worker count."""

    workers: int
    scales: list[int] = field(default_factory=list)
    e: list[float] = field(default_factory=list)


def build_efficiency_curves(paths) -> list[EfficiencyCurve]:
    """Pair runs by scale and reduce their raw timings through e = t1/(n tn).

    Paired runs must be executions of the identical config at different
    worker counts: same frame count and same per-frame particle counts.
    """
    groups: dict[int, dict[int, object]] = {}
    for path in paths:
        table = load_timing_csv(path)
        if table.frames == 0:
            raise PairingError(f"{path}: no frames to average")
        n = table.workers
        scale = table.scale
        slot = groups.setdefault(scale, {})
        if n in slot:
            raise PairingError(
                f"{path}: duplicate run at scale {scale} with {n} workers "
                f"(already have {slot[n].path})")
        slot[n] = table
    curves: dict[int, EfficiencyCurve] = {}
    for scale in sorted(groups):
        slot = groups[scale]
        if 1 not in slot:
            raise PairingError(
                f"scale {scale}: no 1-worker run to pair against "
                f"(have worker counts {sorted(slot)})")
        ref = slot[1]
        for n, table in slot.items():
            if table.frames != ref.frames or not np.array_equal(
                    table["particle_count"], ref["particle_count"]):
                raise PairingError(
                    f"{table.path}: not an execution of the same config as "
                    f"{ref.path} (frames/particle counts differ)")
        t1 = ref.mean_ms_per_frame()
        for n in sorted(slot):
            e = t1 / (n * slot[n].mean_ms_per_frame())
            curve = curves.setdefault(n, EfficiencyCurve(workers=n))
            curve.scales.append(scale)
            curve.e.append(e)
    return [curves[n] for n in sorted(curves)]


def plot_efficiency(csv_paths, out_path) -> list[EfficiencyCurve]:
    """Render e-vs-particle-count curves per worker count; returns them."""
    curves = build_efficiency_curves(csv_paths)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for c in curves:
        ax.plot(c.scales, c.e, marker="o",
                label=f"{c.workers} worker{'s' if c.workers > 1 else ''}")
    ax.axhline(1.0, color="grey", linestyle=":", linewidth=1)
    ax.set_xscale("log")
    ax.set_xlabel("particles")
    ax.set_ylabel("efficiency e = t1 / (n tn)")
    ax.set_ylim(bottom=0.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return curves
