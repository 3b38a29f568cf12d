"""Command-line interface: `plot ablation` and `plot efficiency`."""

from __future__ import annotations

import argparse
import sys

from .ablation import plot_ablation
from .efficiency import plot_efficiency


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot", description="Charts from mpmbench timing CSVs")
    sub = parser.add_subparsers(dest="command", required=True)

    ab = sub.add_parser("ablation",
                        help="grouped timing bars plus overhead percentages")
    ab.add_argument("--baseline", required=True,
                    help="label of the default-pipeline runs")
    ab.add_argument("--csv", nargs="+", required=True,
                    help="timing CSVs as label=path, or bare paths labeled "
                         "by file stem; one file per arm and scale")
    ab.add_argument("--out", required=True, help="output image path")

    ef = sub.add_parser("efficiency",
                        help="efficiency-vs-particle-count curves")
    ef.add_argument("--csv", nargs="+", required=True,
                    help="paired 1..n worker runs of identical configs")
    ef.add_argument("--out", required=True, help="output image path")

    args = parser.parse_args(argv)
    if args.command == "ablation":
        series = plot_ablation(args.csv, args.baseline, args.out)
        for s in series:
            for scale, ms, pct in zip(s.scales, s.ms_per_frame, s.overhead_pct):
                print(f"{s.label} @ {scale}: {ms:.3f} ms/frame "
                      f"({pct:+.1f}% vs {s.baseline_label})")
    else:
        curves = plot_efficiency(args.csv, args.out)
        for c in curves:
            for scale, e in zip(c.scales, c.e):
                print(f"workers={c.workers} @ {scale}: e={e:.4f}")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
