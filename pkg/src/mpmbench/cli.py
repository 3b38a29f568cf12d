"""Command-line interface: `mpmbench simulate` and `mpmbench efficiency`.

Flags override config-file values; flag names mirror the RunConfig fields.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .bench import RunConfig, run, run_efficiency

_SORT_ALIASES = {"full": "full_every_step", "none": "none_between"}


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    """One flag per run-config field (named after it), plus --config."""
    p.add_argument("--config", help="JSON file mirroring the run config")
    p.add_argument("--scene", choices=("sand_blocks", "fountain_lite", "free_fall"))
    p.add_argument("--l", type=int, help="box edge in cells")
    p.add_argument("--boxes", type=int, choices=(1, 4, 16))
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--cfl_auto", action="store_true", default=None)
    p.add_argument("--collect_conservation", action="store_true", default=None)
    p.add_argument("--rebuild", choices=("amortized", "every_step"))
    p.add_argument("--sort", choices=("amortized", "full", "none"))
    p.add_argument("--fusion", choices=("merged", "split_stress", "split_bc",
                                        "split_clear"))
    p.add_argument("--transfer", choices=("split", "g2p2g"))
    done = {"scene", "l", "boxes", "deterministic", "cfl_auto",
            "collect_conservation", "rebuild", "sort", "fusion", "transfer",
            "out_csv", "out_snap"}
    for f in dataclasses.fields(RunConfig):
        if f.name in done:
            continue
        kind = float if f.type.startswith("float") else \
            int if f.type.startswith("int") else str
        p.add_argument(f"--{f.name}", type=kind)


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = _SORT_ALIASES.get(v, v) if f.name == "sort" else v
    return cfg.with_overrides(**overrides)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="mpmbench",
        description="Sparse-grid MLS-MPM benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one configured simulation")
    _add_override_flags(sim)
    sim.add_argument("--out-csv", dest="out_csv", help="per-frame timing CSV")
    sim.add_argument("--out-snap", dest="out_snap",
                     help="directory for per-frame particle snapshots")

    eff = sub.add_parser("efficiency",
                         help="run 1..N workers on one config and report scaling")
    _add_override_flags(eff)
    eff.add_argument("--max-workers", dest="max_workers", type=int, required=True)
    eff.add_argument("--out-csv", dest="out_csv",
                     help="CSV of (workers, t1_ms, tn_ms, e)")

    args = parser.parse_args(argv)
    if args.command == "simulate":
        cfg = _config_from_args(args)
        result = run(cfg)
        print(f"scene={cfg.scene} workers={cfg.workers} "
              f"particles={result.particle_count} frames={len(result.rows)} "
              f"mean_ms_per_frame={result.mean_ms_per_frame:.3f}")
        if result.rebuild_gaps:
            print(f"mean_steps_between_rebuilds="
                  f"{result.mean_steps_between_rebuilds:.2f}")
        return 0

    cfg = _config_from_args(args)
    reports = run_efficiency(cfg.with_overrides(out_csv=None, out_snap=None),
                             args.max_workers)
    lines = []
    for r in reports:
        flag = " (anomalous)" if r.anomalous else ""
        print(f"workers={r.n} t1={r.t1_ms:.3f}ms tn={r.tn_ms:.3f}ms "
              f"e={r.e:.4f}{flag}")
        lines.append((r.n, r.t1_ms, r.tn_ms, r.e))
    if args.out_csv:
        import csv as _csv
        with open(args.out_csv, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(("workers", "t1_ms", "tn_ms", "e"))
            w.writerows(lines)
    return 0


if __name__ == "__main__":
    sys.exit(main())
