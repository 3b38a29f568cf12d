"""Ablation comparison charts: grouped per-scale timing bars plus the
percentage of additional cost of each arm over the baseline pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import PairingError, load_timing_csv, parse_labeled_paths


@dataclass
class AblationSeries:
    """One pipeline arm across scales. Overhead percentages are always
    recomputed from the raw timings, never read from the input."""

    label: str
    baseline_label: str
    scales: list[int] = field(default_factory=list)
    ms_per_frame: list[float] = field(default_factory=list)
    overhead_pct: list[float] = field(default_factory=list)


def build_ablation_series(labeled_paths, baseline_label: str) -> list[AblationSeries]:
    by_label: dict[str, dict[int, float]] = {}
    for label, path in labeled_paths:
        table = load_timing_csv(path)
        if table.frames == 0:
            raise PairingError(f"{path}: no frames to average")
        by_label.setdefault(label, {})[table.scale] = table.mean_ms_per_frame()
    if baseline_label not in by_label:
        raise PairingError(
            f"baseline label {baseline_label!r} not among inputs "
            f"{sorted(by_label)}")
    base = by_label[baseline_label]
    series = []
    for label in sorted(by_label):
        arm = by_label[label]
        s = AblationSeries(label=label, baseline_label=baseline_label)
        for scale in sorted(arm):
            if scale not in base:
                raise PairingError(
                    f"arm {label!r} has scale {scale} with no baseline run")
            ms = arm[scale]
            s.scales.append(scale)
            s.ms_per_frame.append(ms)
            s.overhead_pct.append((ms - base[scale]) / base[scale] * 100.0)
        series.append(s)
    return series


def _scale_tick(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def plot_ablation(csv_paths, baseline_label: str, out_path) -> list[AblationSeries]:
    """Render the two-panel comparison and return the computed series.

    csv_paths entries are `label=path` pairs or bare paths (labeled by file
    stem); each file is one arm at one scale.
    """
    series = build_ablation_series(parse_labeled_paths(csv_paths),
                                   baseline_label)
    scales = sorted({s for ser in series for s in ser.scales})
    fig, (ax_ms, ax_over) = plt.subplots(1, 2, figsize=(11, 4.2))
    width = 0.8 / max(len(series), 1)
    for k, ser in enumerate(series):
        xs = [scales.index(s) + k * width for s in ser.scales]
        ax_ms.bar(xs, ser.ms_per_frame, width=width, label=ser.label)
        if ser.label != baseline_label:
            ax_over.bar(xs, ser.overhead_pct, width=width, label=ser.label)
        else:
            ax_over.bar(xs, [0.0] * len(xs), width=width, label=ser.label)
    for ax, title in ((ax_ms, "timing per frame (ms)"),
                      (ax_over, "additional cost over "
                                f"{baseline_label!r} (%)")):
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(scales))])
        ax.set_xticklabels([_scale_tick(s) for s in scales])
        ax.set_xlabel("particles")
        ax.set_title(title)
        ax.legend(fontsize=8)
    ax_ms.set_ylabel("ms / frame")
    ax_over.set_ylabel("overhead %")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return series
