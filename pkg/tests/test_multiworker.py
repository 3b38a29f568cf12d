import threading
import time

import numpy as np
import pytest

from mpmbench import (EfficiencyReport, Material, RunConfig, SharedRuntime,
                      SimParams, SpinBarrier, efficiency, partition_particles,
                      run, tag_shared_blocks)
from mpmbench.bench import _gather_snapshot_positions
from mpmbench.errors import BarrierTimeoutError, RejectedInputError
from mpmbench.pipeline import PipelineOptions, Worker


class TestPartition:
    def test_single_worker_full_range(self, rng):
        pos = rng.uniform(0, 1, (10, 3))
        parts = partition_particles(pos, 1)
        assert len(parts) == 1 and sorted(parts[0]) == list(range(10))

    def test_even_split(self, rng):
        pos = rng.uniform(0, 1, (100, 3))
        parts = partition_particles(pos, 4)
        assert [len(p) for p in parts] == [25, 25, 25, 25]

    def test_remainder_spread_from_worker_zero(self, rng):
        pos = rng.uniform(0, 1, (10, 3))
        parts = partition_particles(pos, 4)
        assert [len(p) for p in parts] == [3, 3, 2, 2]

    def test_partitions_disjoint_exhaustive_and_axis_sorted(self, rng):
        pos = rng.uniform(0, 1, (57, 3))
        pos[:, 1] *= 50.0  # make y the longest axis
        parts = partition_particles(pos, 3)
        seen = np.concatenate(parts)
        assert sorted(seen) == list(range(57))
        # contiguous along the longest axis: every worker's max <= next min
        for a, b in zip(parts, parts[1:]):
            assert pos[a, 1].max() <= pos[b, 1].min() + 1e-12

    def test_deterministic(self, rng):
        pos = rng.uniform(0, 1, (33, 3))
        p1 = partition_particles(pos, 3)
        p2 = partition_particles(pos, 3)
        assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


class TestSpinBarrier:
    def test_single_worker_returns_immediately(self):
        b = SpinBarrier(1)
        assert b.wait(0) == 0
        assert b.wait(0) == 1
        assert b.generations == 2

    def test_staggered_arrivals_release_together(self):
        b = SpinBarrier(4)
        released = []
        lock = threading.Lock()

        def arrive(wid, delay):
            time.sleep(delay)
            gen = b.wait(wid)
            with lock:
                released.append((wid, gen, time.monotonic()))

        threads = [threading.Thread(target=arrive, args=(w, 0.02 * w))
                   for w in range(4)]
        t0 = time.monotonic()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert all(gen == 0 for _, gen, _ in released)
        # nobody returned before the last arrival (~60 ms in)
        assert min(ts for _, _, ts in released) >= t0 + 0.06 - 0.02

    def test_thousand_generations_with_jitter(self, rng):
        n, gens = 4, 1000
        b = SpinBarrier(n)
        counts = np.zeros(n, dtype=np.int64)
        seen = [[] for _ in range(n)]
        seeds = rng.integers(0, 2**32, size=n)

        def worker(wid):
            r = np.random.default_rng(seeds[wid])
            for _ in range(gens):
                if r.random() < 0.05:
                    time.sleep(r.random() * 1e-4)
                g = b.wait(wid)
                seen[wid].append(g)
                counts[wid] += 1

        threads = [threading.Thread(target=worker, args=(w,)) for w in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert b.generations == gens
        assert (counts == gens).all()
        for s in seen:
            assert s == list(range(gens))  # no lost or duplicated generation

    def test_watchdog_timeout(self):
        b = SpinBarrier(2, timeout=0.2)
        with pytest.raises(BarrierTimeoutError):
            b.wait(0)

    def test_rejects_zero_workers(self):
        with pytest.raises(RejectedInputError):
            SpinBarrier(0)


def _two_worker_topology(pos_by_worker, vel_by_worker=None, det=False,
                         dx=0.5, dt=1e-4):
    params = SimParams(dx=dx, dt=dt, gravity=(0.0, 0.0, 0.0))
    material = Material.fixed_corotated(2.0, 1.0e5, 0.3)
    runtime = SharedRuntime(len(pos_by_worker))
    opts = PipelineOptions(deterministic=det)
    workers = []
    nid = 0
    for wid, pos in enumerate(pos_by_worker):
        w = Worker(wid, runtime, params, material, None, opts)
        pos = np.atleast_2d(pos)
        vel = np.zeros_like(pos) if vel_by_worker is None \
            else np.atleast_2d(vel_by_worker[wid])
        if len(pos):
            w.seed_particles(pos, vel, 0.25,
                             ids=np.arange(nid, nid + len(pos)))
            nid += len(pos)
        w.dt = params.dt
        workers.append(w)
    return workers, runtime


def _run_lockstep(workers, steps):
    errors = []

    def drive(w):
        try:
            for s in range(w._global_step, w._global_step + steps):
                w.run_step(s)
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=drive, args=(w,)) for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return workers


class TestSharedBlocks:
    def test_disjoint_partitions_share_nothing(self):
        workers, _ = _two_worker_topology([(8.0, 8.0, 8.0), (20.0, 20.0, 20.0)])
        _run_lockstep(workers, 1)
        recs = tag_shared_blocks(workers)
        assert recs == [[], []]

    def test_identical_gblock_shares_all_27_pblocks(self):
        workers, _ = _two_worker_topology([(8.0, 8.0, 8.0), (8.0, 8.0, 8.0)])
        _run_lockstep(workers, 1)
        recs = tag_shared_blocks(workers)
        assert len(recs[0]) == 27 and len(recs[1]) == 27
        for rec in recs[0]:
            assert rec.peers == [(1, rec.local_index)] or len(rec.peers) == 1

    def test_records_are_symmetric(self, rng):
        pos0 = rng.uniform(6.0, 10.0, (40, 3))
        pos1 = rng.uniform(8.0, 12.0, (40, 3))
        workers, _ = _two_worker_topology([pos0, pos1])
        _run_lockstep(workers, 1)
        recs = tag_shared_blocks(workers)
        pairs0 = {(r.local_index, q, qi) for r in recs[0] for (q, qi) in r.peers}
        pairs1 = {(r.local_index, q, qi) for r in recs[1] for (q, qi) in r.peers}
        assert {(qi, 0, li) for (li, q, qi) in pairs0 if q == 1} == pairs1

    def test_reduction_sums_overlapping_mass(self):
        # both workers deposit the same particle position: every touched node
        # must carry twice the single-worker mass on both workers
        p = (8.0, 8.0, 8.0)
        workers, _ = _two_worker_topology([p, p])
        _run_lockstep(workers, 1)
        for w in workers:
            vel = w.grid.vel.data[:w.table.count]
            total = vel[:, 0, :].sum()
            assert np.isclose(total, 2 * 0.25, rtol=1e-12)
        solo, _ = _two_worker_topology([np.atleast_2d(p)])
        _run_lockstep(solo, 1)
        svel = solo[0].grid.vel.data[:solo[0].table.count]
        assert np.isclose(svel[:, 0, :].sum(), 0.25, rtol=1e-12)

    def test_zero_peers_copies_raw_into_result(self):
        workers, _ = _two_worker_topology([(8.0, 8.0, 8.0), (20.0, 20.0, 20.0)])
        _run_lockstep(workers, 1)
        for w in workers:
            raw = w.grid.raw[0].data[:w.table.count]
            vel = w.grid.vel.data[:w.table.count]
            t = w.table.touched_indices(0)
            assert np.array_equal(raw[t][:, 0, :], vel[t][:, 0, :])

    def test_peer_raw_buffers_unmodified_by_reduction(self):
        workers, _ = _two_worker_topology([(8.0, 8.0, 8.0), (8.2, 8.2, 8.2)])
        _run_lockstep(workers, 1)
        snapshots = [w.grid.raw[0].data[:w.table.count].copy() for w in workers]
        # re-running the reduce+update phase must not disturb any raw buffer
        for w in workers:
            w._reduce_and_update(0)
        for w, before in zip(workers, snapshots):
            assert np.array_equal(w.grid.raw[0].data[:w.table.count], before)


class TestWorkerEquivalence:
    def _final(self, workers_n, det=True, frames=1):
        cfg = RunConfig(scene="sand_blocks", l=6, boxes=1, ppc=8,
                        frames=frames, workers=workers_n, deterministic=det,
                        init_speed=-100.0)
        res = run(cfg)
        return _gather_snapshot_positions(res.workers)

    def test_deterministic_mode_bit_identical_up_to_4_workers(self):
        base = self._final(1)
        for n in (2, 3, 4):
            assert np.array_equal(base, self._final(n))

    def test_atomic_mode_within_tolerance(self):
        base = self._final(1, det=False)
        for n in (2, 4):
            got = self._final(n, det=False)
            dom = 64 * 25.0 / 64.0
            assert np.abs(got - base).max() / dom <= 1e-5

    def test_barrier_generations_equal_steps(self):
        cfg = RunConfig(scene="sand_blocks", l=6, boxes=1, ppc=8, frames=2,
                        workers=2)
        res = run(cfg)
        runtime = res.workers[0].runtime
        total_steps = sum(r.steps for r in res.rows)
        assert runtime.barrier.generations == total_steps

    def test_workload_balance_at_init(self):
        cfg = RunConfig(scene="sand_blocks", l=6, boxes=1, ppc=8, frames=1,
                        workers=3)
        res = run(cfg)
        counts = [w.store.count for w in res.workers]
        assert max(counts) - min(counts) <= 1


class TestEfficiency:
    def test_ideal_scaling(self):
        r = efficiency(8.0, 2.0, 4)
        assert r.e == 1.0 and not r.anomalous

    def test_direct_formula(self):
        r = efficiency(12.0, 7.5, 2)
        assert np.isclose(r.e, 0.8)

    def test_anomaly_flag(self):
        assert efficiency(10.0, 2.0, 4).anomalous
        assert not efficiency(10.0, 2.5, 4).anomalous

    def test_rejects_nonpositive(self):
        with pytest.raises(RejectedInputError):
            efficiency(0.0, 1.0, 2)
        with pytest.raises(RejectedInputError):
            efficiency(1.0, -1.0, 2)
        with pytest.raises(RejectedInputError):
            EfficiencyReport(t1_ms=1.0, tn_ms=1.0, n=0)
