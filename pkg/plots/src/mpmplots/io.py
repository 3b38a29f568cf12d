"""Reading and validating the benchmark harness's per-frame timing CSVs.

The producer's wire format is the TimingRow schema: one header line with
exactly these columns, one row per frame. Everything downstream recomputes
derived quantities from the raw timing columns and never trusts summary
values baked into inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TIMING_COLUMNS = ("frame", "steps", "ms_total", "ms_rebuild", "ms_sort",
                  "ms_p2g", "ms_grid", "ms_g2p", "rebuild_count",
                  "realloc_count", "workers", "particle_count")

_INT_COLUMNS = {"frame", "steps", "rebuild_count", "realloc_count",
                "workers", "particle_count"}


class SchemaMismatchError(ValueError):
    """The CSV header does not match the TimingRow schema."""


class PairingError(ValueError):
    """Runs cannot be paired into (1 worker, n workers) groups."""


@dataclass
class TimingTable:
    """One run's per-frame rows, as typed numpy columns."""

    path: str
    columns: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def frames(self) -> int:
        return len(self.columns["frame"])

    @property
    def workers(self) -> int:
        w = np.unique(self.columns["workers"])
        if len(w) != 1:
            raise PairingError(f"{self.path}: mixed worker counts {list(w)}")
        return int(w[0])

    @property
    def scale(self) -> int:
        """Run scale = particle count of the last frame."""
        return int(self.columns["particle_count"][-1])

    def mean_ms_per_frame(self) -> float:
        return float(self.columns["ms_total"].mean())


def load_timing_csv(path) -> TimingTable:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatchError(f"{path}: empty file, no header") from None
        if tuple(header) != TIMING_COLUMNS:
            missing = [c for c in TIMING_COLUMNS if c not in header]
            extra = [c for c in header if c not in TIMING_COLUMNS]
            raise SchemaMismatchError(
                f"{path}: header does not match the timing schema; "
                f"missing columns {missing}, unexpected columns {extra}")
        rows = [row for row in reader if row]
    cols: dict[str, np.ndarray] = {}
    for i, name in enumerate(TIMING_COLUMNS):
        values = [row[i] for row in rows]
        dtype = np.int64 if name in _INT_COLUMNS else np.float64
        # integer columns may arrive as "3" or "3.0" depending on the writer
        cols[name] = np.array([float(v) for v in values]).astype(dtype) \
            if values else np.array([], dtype=dtype)
    return TimingTable(path=str(path), columns=cols)


def parse_labeled_paths(specs) -> list[tuple[str, str]]:
    """`label=path` pairs, or bare paths labeled by their file stem."""
    out = []
    for spec in specs:
        if "=" in str(spec):
            label, path = str(spec).split("=", 1)
        else:
            label, path = Path(spec).stem, str(spec)
        out.append((label, path))
    return out
