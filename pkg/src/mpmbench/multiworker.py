"""n-worker domain decomposition runtime.

Workers are OS threads sharing one address space. Each worker owns its
particle store, block table, and nodal buffers; peers may read (never write)
a worker's published raw buffer, touched flags, and block-code list, and only
in the window between the post-scatter barrier and the end of that worker's
grid update. The spin barrier provides the only cross-worker ordering edge of
a step.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BarrierTimeoutError, RejectedInputError

_SPIN_YIELD_AFTER = 200
_SPIN_SLEEP = 20e-6

EFFICIENCY_ANOMALY = 1.05


class SpinBarrier:
    """Generation-counting barrier: a shared arrival counter plus a
    generation flag that waiters spin on.

    The arrival increment is guarded by a tiny mutex (CPython offers no
    user-level atomics), but waiting is lock-free spinning on the generation
    word. A watchdog aborts with a diagnostic if some worker never arrives.
    """

    def __init__(self, n_workers: int, timeout: float = 10.0):
        if n_workers < 1:
            raise RejectedInputError(f"barrier needs >= 1 workers, got {n_workers}")
        self.n = n_workers
        self.timeout = timeout
        self._arrived = 0
        self._generation = 0
        self._lock = threading.Lock()

    @property
    def generations(self) -> int:
        """Completed generations since construction."""
        return self._generation

    def wait(self, worker_id: int) -> int:
        """Block until all workers arrive; returns the generation passed."""
        with self._lock:
            gen = self._generation
            self._arrived += 1
            if self._arrived == self.n:
                self._arrived = 0
                self._generation = gen + 1
                return gen
        deadline = time.monotonic() + self.timeout
        spins = 0
        while self._generation == gen:
            spins += 1
            if spins > _SPIN_YIELD_AFTER:
                time.sleep(_SPIN_SLEEP)
                if time.monotonic() > deadline:
                    raise BarrierTimeoutError(
                        f"worker {worker_id} stuck at barrier generation {gen}: "
                        f"only {self._arrived}/{self.n} workers arrived within "
                        f"{self.timeout:.1f}s")
        return gen


class SharedRuntime:
    """Cross-worker state: the barrier plus per-step publication slots.

    Publication slots are keyed by step parity because a worker may run one
    step ahead of a slow peer; the peer's reads of step s finish before the
    fast worker can publish step s+2 (it would have to pass the s+1 barrier
    first), so two slots suffice. Particle-speed maxima rotate through three
    slots: they are written pre-barrier by the fused transfer, so readers two
    steps later need the extra slot of separation.
    """

    def __init__(self, n_workers: int, barrier_timeout: float = 10.0,
                 initial_vmax: float = 0.0):
        self.n_workers = n_workers
        self.barrier = SpinBarrier(n_workers, timeout=barrier_timeout)
        self._steps = [[None] * n_workers, [None] * n_workers]
        self._vmax = np.full((3, n_workers), float(initial_vmax))

    def seed_vmax(self, value: float) -> None:
        self._vmax[:, :] = float(value)

    def barrier_wait(self, worker_id: int) -> int:
        return self.barrier.wait(worker_id)

    def publish_step(self, parity: int, worker_id: int, state) -> None:
        self._steps[parity & 1][worker_id] = state

    def peer_step(self, parity: int, worker_id: int):
        return self._steps[parity & 1][worker_id]

    def publish_vmax(self, slot: int, worker_id: int, value: float) -> None:
        self._vmax[slot % 3, worker_id] = value

    def global_vmax(self, slot: int) -> float:
        return float(self._vmax[slot % 3].max())


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def partition_particles(positions: np.ndarray, n: int) -> list[np.ndarray]:
    """Split particles into n near-equal contiguous ranges along the longest
    bounding-box axis of the cluster.

    Returns per-worker arrays of indices into `positions`. Sizes differ by at
    most one, with remainders handed out from worker 0.
    """
    if n < 1:
        raise RejectedInputError(f"worker count must be >= 1, got {n}")
    pos = np.asarray(positions, dtype=np.float64)
    count = pos.shape[0]
    if count == 0:
        return [np.empty(0, dtype=np.int64) for _ in range(n)]
    extent = pos.max(axis=0) - pos.min(axis=0)
    axis = int(np.argmax(extent))
    order = np.argsort(pos[:, axis], kind="stable")
    base, rem = divmod(count, n)
    sizes = [base + 1 if w < rem else base for w in range(n)]
    out = []
    start = 0
    for s in sizes:
        out.append(order[start:start + s])
        start += s
    return out


# ---------------------------------------------------------------------------
# Shared-block records
# ---------------------------------------------------------------------------

@dataclass
class SharedBlockRecord:
    """One local pblock and every peer holding the same block code."""

    local_index: int
    peers: list[tuple[int, int]] = field(default_factory=list)


def shared_block_records(worker) -> list[SharedBlockRecord]:
    """Materialize a worker's per-peer index maps as explicit records."""
    records: dict[int, SharedBlockRecord] = {}
    for q, m in enumerate(worker._peer_map):
        if q == worker.wid or m is None:
            continue
        for local_idx in np.flatnonzero(m >= 0):
            rec = records.setdefault(int(local_idx), SharedBlockRecord(int(local_idx)))
            rec.peers.append((q, int(m[local_idx])))
    return [records[k] for k in sorted(records)]


def tag_shared_blocks(workers) -> list[list[SharedBlockRecord]]:
    """Recompute every worker's shared-block records from the published code
    lists (the per-step pipeline does this after the barrier whenever any
    worker rebuilt; this helper exists for direct use and tests)."""
    for w in workers:
        codes, count = w._published_codes
        if count != w.table.count:
            raise RejectedInputError(
                f"worker {w.wid} has not published its current block codes")
    for w in workers:
        for q, peer in enumerate(workers):
            if q == w.wid:
                continue
            codes, count = peer._published_codes
            idx = w.table.hash.lookup_batch(codes[:count])
            m = np.full(w.table.count, -1, dtype=np.int64)
            found = np.flatnonzero(idx >= 0)
            m[idx[found]] = found
            w._peer_map[q] = m
    return [shared_block_records(w) for w in workers]


# ---------------------------------------------------------------------------
# Efficiency metric
# ---------------------------------------------------------------------------

@dataclass
class EfficiencyReport:
    """Multi-worker scaling: e = t1 / (n * tn), 1.0 is ideal."""

    t1_ms: float
    tn_ms: float
    n: int
    e: float = 0.0
    anomalous: bool = False

    def __post_init__(self):
        if self.t1_ms <= 0.0 or self.tn_ms <= 0.0:
            raise RejectedInputError(
                f"timings must be positive, got t1={self.t1_ms} tn={self.tn_ms}")
        if self.n < 1:
            raise RejectedInputError(f"worker count must be >= 1, got {self.n}")
        self.e = self.t1_ms / (self.n * self.tn_ms)
        self.anomalous = self.e > EFFICIENCY_ANOMALY


def efficiency(t1_ms: float, tn_ms: float, n: int) -> EfficiencyReport:
    return EfficiencyReport(t1_ms=t1_ms, tn_ms=tn_ms, n=n)
