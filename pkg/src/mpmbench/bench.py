"""Scenario generation, run orchestration, timing capture, and result output.

The harness thread is single-threaded: it builds the scene, launches the
worker topology, and blocks on frame boundaries. Wall-clock timing happens
here; per-phase breakdowns are measured inside the workers and aggregated per
frame. Timing columns are explicitly excluded from determinism guarantees;
everything else in the CSV and the snapshots is byte-reproducible for a
fixed config and seed.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .domain import Material, SimParams
from .errors import ConfigError, SimulationError
from .multiworker import EfficiencyReport, SharedRuntime, efficiency, \
    partition_particles
from .pipeline import BoundaryBox, PipelineOptions, Worker

SNAPSHOT_MAGIC = b"MPMF"
SNAPSHOT_VERSION = 1

CSV_COLUMNS = ("frame", "steps", "ms_total", "ms_rebuild", "ms_sort",
               "ms_p2g", "ms_grid", "ms_g2p", "rebuild_count",
               "realloc_count", "workers", "particle_count")

SCENES = ("sand_blocks", "fountain_lite", "free_fall")

_WALL_MARGIN_CELLS = 8  # two blocks between the boundary box and cell zero


@dataclass
class TimingRow:
    frame: int
    steps: int
    ms_total: float
    ms_rebuild: float
    ms_sort: float
    ms_p2g: float
    ms_grid: float
    ms_g2p: float
    rebuild_count: int
    realloc_count: int
    workers: int
    particle_count: int

    def as_list(self):
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class RunConfig:
    """One benchmark run. CLI flags mirror these field names."""

    scene: str = "sand_blocks"
    l: int = 12
    boxes: int = 4
    ppc: int = 8
    dx: float = 25.0 / 64.0
    frames: int = 4
    steps_per_frame: int = 36
    frame_dt: float = 1.0 / 48.0
    cfl: float = 0.5
    cfl_auto: bool | None = None   # None: scene default (fountain only)
    workers: int = 1
    lane_width: int = 32
    rebuild: str = "amortized"
    sort: str = "amortized"
    fusion: str = "merged"
    transfer: str = "split"
    deterministic: bool = False
    seed: int = 2024
    out_csv: str | None = None
    out_snap: str | None = None
    # scene knobs
    gap_cells: int | None = None   # None: one box edge
    drop_cells: int = 2
    init_speed: float = -150.0
    density: float = 2.0
    young: float = 1.0e5
    poisson: float = 0.3
    bulk_modulus: float = 1.0e5
    gamma: float = 7.0
    fountain_radius: float | None = None  # None: 1.5 dx
    emit_speed: float = 160.0
    gravity_z: float = -981.0
    flip_blend: float = 0.0
    fused_threshold: int = 100_000
    collect_conservation: bool = False
    barrier_timeout: float = 10.0

    def __post_init__(self):
        if self.scene not in SCENES:
            raise ConfigError(f"scene must be one of {SCENES}, got {self.scene!r}")
        for name in ("l", "ppc", "steps_per_frame", "workers", "lane_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.frames < 0:
            raise ConfigError(f"frames must be >= 0, got {self.frames}")
        if self.boxes not in (1, 4, 16):
            raise ConfigError(f"boxes must be 1, 4 or 16, got {self.boxes}")
        side = round(self.ppc ** (1.0 / 3.0))
        if side ** 3 != self.ppc:
            raise ConfigError(f"ppc must be a perfect cube for stratified "
                              f"sampling, got {self.ppc}")
        if self.scene == "fountain_lite" and self.transfer == "g2p2g":
            raise ConfigError("the fountain emits particles every frame, which "
                              "conflicts with the fused G2P2G transfer")

    @property
    def cfl_enabled(self) -> bool:
        if self.cfl_auto is None:
            return self.scene == "fountain_lite"
        return self.cfl_auto

    @staticmethod
    def from_json(path) -> "RunConfig":
        with open(path) as fh:
            payload = json.load(fh)
        return RunConfig.from_dict(payload)

    @staticmethod
    def from_dict(payload: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return RunConfig(**payload)

    def with_overrides(self, **overrides) -> "RunConfig":
        payload = asdict(self)
        for k, v in overrides.items():
            if v is not None:
                payload[k] = v
        return RunConfig.from_dict(payload)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def sand_blocks_count(l: int, boxes: int, ppc: int) -> int:
    return boxes * l ** 3 * ppc


def _stratified_box(rng, origin_cells, l: int, ppc: int, dx: float) -> np.ndarray:
    """ppc stratified-random samples per cell of an l^3-cell box: the cell is
    split into ppc congruent subcells with one uniform sample in each."""
    s = round(ppc ** (1.0 / 3.0))
    cells = np.stack(np.meshgrid(np.arange(l), np.arange(l), np.arange(l),
                                 indexing="ij"), axis=-1).reshape(-1, 3)
    subs = np.stack(np.meshgrid(np.arange(s), np.arange(s), np.arange(s),
                                indexing="ij"), axis=-1).reshape(-1, 3)
    base = (cells[:, None, :] * s + subs[None, :, :]).reshape(-1, 3)
    u = rng.random((base.shape[0], 3))
    return (np.asarray(origin_cells) + (base + u) / s) * dx


def gen_sand_blocks(l: int, boxes: int, ppc: int, dx: float, seed: int,
                    gap_cells: int | None = None, drop_cells: int = 2):
    """Particle cloud for the falling-boxes scene.

    Boxes sit on a horizontal grid above the floor with uniform gaps (one box
    edge by default). Returns (positions, domain_cells) with positions in cm;
    domain_cells is the cubic grid extent that leaves the required margins.
    """
    if boxes not in (1, 4, 16):
        raise ConfigError(f"boxes must be 1, 4 or 16, got {boxes}")
    side = int(round(math.sqrt(boxes)))
    gap = l if gap_cells is None else int(gap_cells)
    if gap < 0 or drop_cells < 0:
        raise ConfigError("gap_cells and drop_cells must be >= 0")
    m = _WALL_MARGIN_CELLS
    span = side * l + (side + 1) * gap
    height = drop_cells + l + max(2 * l, 12)
    domain = max(span + 2 * m, height + 2 * m)
    rng = np.random.default_rng(seed)
    parts = []
    for by in range(side):
        for bx in range(side):
            origin = (m + gap + bx * (l + gap), m + gap + by * (l + gap),
                      m + drop_cells)
            parts.append(_stratified_box(rng, origin, l, ppc, dx))
    return np.concatenate(parts, axis=0), domain


@dataclass
class EmissionSpec:
    """A per-frame particle source: a ball of cells resampled each frame."""

    cells: np.ndarray         # (k, 3) cell coordinates
    ppc: int
    dx: float
    seed: int
    velocity: tuple[float, float, float]

    @property
    def per_frame(self) -> int:
        return len(self.cells) * self.ppc

    def sample(self, frame: int):
        rng = np.random.default_rng([self.seed, frame])
        s = round(self.ppc ** (1.0 / 3.0))
        subs = np.stack(np.meshgrid(np.arange(s), np.arange(s), np.arange(s),
                                    indexing="ij"), axis=-1).reshape(-1, 3)
        base = (self.cells[:, None, :] * s + subs[None, :, :]).reshape(-1, 3)
        u = rng.random((base.shape[0], 3))
        pos = (base + u) / s * self.dx
        vel = np.broadcast_to(np.asarray(self.velocity, dtype=np.float64),
                              pos.shape).copy()
        return pos, vel


def gen_fountain_lite(center, radius: float, emit_velocity, dx: float,
                      seed: int, ppc: int = 27) -> EmissionSpec:
    """Ball-shaped source emission spec; at least the center cell emits."""
    c = np.asarray(center, dtype=np.float64)
    r = max(float(radius), 1e-9)
    lo = np.floor((c - r) / dx).astype(np.int64)
    hi = np.ceil((c + r) / dx).astype(np.int64)
    cells = []
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            for k in range(lo[2], hi[2] + 1):
                center_of_cell = (np.array([i, j, k]) + 0.5) * dx
                if np.linalg.norm(center_of_cell - c) <= r:
                    cells.append((i, j, k))
    if not cells:
        cells.append(tuple(int(v) for v in np.floor(c / dx)))
    return EmissionSpec(cells=np.asarray(cells, dtype=np.int64), ppc=ppc,
                        dx=dx, seed=seed, velocity=tuple(emit_velocity))


@dataclass
class WorldSpec:
    params: SimParams
    material: Material
    boundary: BoundaryBox | None
    positions: np.ndarray
    velocities: np.ndarray
    particle_mass: float
    emission: EmissionSpec | None = None


def build_scene(cfg: RunConfig) -> WorldSpec:
    dx = cfg.dx
    dt = cfg.frame_dt / cfg.steps_per_frame
    params = SimParams(dx=dx, dt=dt, gravity=(0.0, 0.0, cfg.gravity_z),
                       frame_dt=cfg.frame_dt, steps_per_frame=cfg.steps_per_frame,
                       cfl=cfg.cfl, lane_width=cfg.lane_width,
                       flip_blend=cfg.flip_blend)
    if cfg.scene == "sand_blocks":
        positions, domain = gen_sand_blocks(cfg.l, cfg.boxes, cfg.ppc, dx,
                                            cfg.seed, cfg.gap_cells,
                                            cfg.drop_cells)
        velocities = np.zeros_like(positions)
        velocities[:, 2] = cfg.init_speed
        material = Material.fixed_corotated(cfg.density, cfg.young, cfg.poisson)
        boundary = BoundaryBox(
            (_WALL_MARGIN_CELLS * dx,) * 3,
            ((domain - _WALL_MARGIN_CELLS) * dx,) * 3, mode="slip")
        mass = cfg.density * dx ** 3 / cfg.ppc
        return WorldSpec(params, material, boundary, positions, velocities, mass)
    if cfg.scene == "fountain_lite":
        domain = 64
        material = Material.fluid(1.0, cfg.bulk_modulus, cfg.gamma)
        boundary = BoundaryBox(
            (_WALL_MARGIN_CELLS * dx,) * 3,
            ((domain - _WALL_MARGIN_CELLS) * dx,) * 3, mode="slip")
        radius = 1.5 * dx if cfg.fountain_radius is None else cfg.fountain_radius
        center = (domain * dx / 2.0, domain * dx / 2.0, domain * dx * 0.45)
        emission = gen_fountain_lite(center, radius, (0.0, 0.0, cfg.emit_speed),
                                     dx, cfg.seed, ppc=27)
        mass = material.density * dx ** 3 / 27.0
        empty = np.zeros((0, 3))
        return WorldSpec(params, material, boundary, empty, empty.copy(),
                         mass, emission=emission)
    # free fall: a lone particle in gravity, far from any boundary
    domain = 64
    material = Material.fixed_corotated(cfg.density, cfg.young, cfg.poisson)
    center = np.array([[domain * dx / 2.0] * 3])
    positions = center
    velocities = np.zeros((1, 3))
    mass = cfg.density * dx ** 3
    return WorldSpec(params, material, None, positions, velocities, mass)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def write_snapshot(path, positions: np.ndarray) -> None:
    """Bit-exact snapshot: magic, u32 version, u32 count, f32 xyz triples."""
    pos = np.ascontiguousarray(np.asarray(positions, dtype=np.float32))
    if pos.ndim != 2 or (pos.shape[0] and pos.shape[1] != 3):
        raise ConfigError(f"positions must be (n, 3), got {pos.shape}")
    try:
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<II", SNAPSHOT_VERSION, pos.shape[0]))
            fh.write(pos.astype("<f4").tobytes())
    except OSError as exc:
        raise SimulationError(f"cannot write snapshot {path}: {exc}") from exc


def read_snapshot(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise SimulationError(f"cannot read snapshot {path}: {exc}") from exc
    if blob[:4] != SNAPSHOT_MAGIC:
        raise SimulationError(f"{path} is not a particle snapshot")
    version, count = struct.unpack("<II", blob[4:12])
    if version != SNAPSHOT_VERSION:
        raise SimulationError(f"unsupported snapshot version {version}")
    data = np.frombuffer(blob[12:], dtype="<f4")
    return data.reshape(count, 3).astype(np.float32)


# ---------------------------------------------------------------------------
# Run orchestration
# ---------------------------------------------------------------------------

class _Orchestra:
    """Owns the worker threads for one run and steps them frame by frame."""

    def __init__(self, workers: list[Worker]):
        self.workers = workers
        n = len(workers)
        self._start = threading.Barrier(n + 1)
        self._end = threading.Barrier(n + 1)
        self._stop = False
        self._errors: list[BaseException | None] = [None] * n
        self._threads = [threading.Thread(target=self._loop, args=(w,),
                                          daemon=True, name=f"mpm-worker-{w.wid}")
                         for w in workers]
        for t in self._threads:
            t.start()

    def _loop(self, worker: Worker) -> None:
        while True:
            self._start.wait()
            if self._stop:
                return
            try:
                worker.run_frame()
            except BaseException as exc:  # reported by the orchestrator
                self._errors[worker.wid] = (exc, worker._global_step)
            self._end.wait()

    def run_one_frame(self, frame: int, timeout: float = 120.0) -> None:
        self._start.wait(timeout)
        self._end.wait(timeout)
        for wid, err in enumerate(self._errors):
            if err is not None:
                exc, step = err
                self._errors[wid] = None
                exc.args = (f"frame {frame}, step {step}, worker {wid}: "
                            f"{exc}",) + exc.args[1:]
                raise exc

    def shutdown(self) -> None:
        self._stop = True
        try:
            self._start.wait(1.0)
        except threading.BrokenBarrierError:
            pass
        for t in self._threads:
            t.join(timeout=5.0)


@dataclass
class RunResult:
    rows: list[TimingRow]
    workers: list
    mean_ms_per_frame: float
    rebuild_gaps: list[int]
    particle_count: int
    conservation: list
    counters: np.ndarray
    snapshot_paths: list[str] = field(default_factory=list)

    @property
    def mean_steps_between_rebuilds(self) -> float:
        return float(np.mean(self.rebuild_gaps)) if self.rebuild_gaps else math.inf


def _gather_snapshot_positions(workers: list[Worker]) -> np.ndarray:
    chunks = [w.store.positions_with_ids() for w in workers]
    pos = np.concatenate([c[0] for c in chunks], axis=0)
    ids = np.concatenate([c[1] for c in chunks], axis=0)
    order = np.argsort(ids, kind="stable")
    return pos[order]


def _split_even(n_items: int, n_workers: int) -> list[slice]:
    base, rem = divmod(n_items, n_workers)
    sizes = [base + 1 if w < rem else base for w in range(n_workers)]
    out = []
    start = 0
    for s in sizes:
        out.append(slice(start, start + s))
        start += s
    return out


def run(cfg: RunConfig, params_override: SimParams | None = None) -> RunResult:
    """Execute one configured run; streams CSV rows and snapshots if asked."""
    spec = build_scene(cfg)
    params = params_override or spec.params
    options = PipelineOptions(
        rebuild=cfg.rebuild, sort=cfg.sort, fusion=cfg.fusion,
        transfer=cfg.transfer, deterministic=cfg.deterministic,
        fused_threshold=cfg.fused_threshold,
        collect_conservation=cfg.collect_conservation)
    init_vmax = float(np.linalg.norm(spec.velocities, axis=1).max()) \
        if len(spec.velocities) else 0.0
    if spec.emission is not None:
        init_vmax = max(init_vmax, float(np.linalg.norm(spec.emission.velocity)))
    runtime = SharedRuntime(cfg.workers, barrier_timeout=cfg.barrier_timeout,
                            initial_vmax=init_vmax)
    workers = [Worker(w, runtime, params, spec.material, spec.boundary, options)
               for w in range(cfg.workers)]
    parts = partition_particles(spec.positions, cfg.workers)
    for w, part in zip(workers, parts):
        w.cfl_mode = cfg.cfl_enabled
        if len(part):
            w.seed_particles(spec.positions[part], spec.velocities[part],
                             spec.particle_mass, ids=part)
    next_id = len(spec.positions)

    csv_fh = None
    csv_writer = None
    if cfg.out_csv:
        Path(cfg.out_csv).parent.mkdir(parents=True, exist_ok=True)
        csv_fh = open(cfg.out_csv, "w", newline="")
        csv_writer = csv.writer(csv_fh)
        csv_writer.writerow(CSV_COLUMNS)
    snap_dir = None
    if cfg.out_snap:
        snap_dir = Path(cfg.out_snap)
        snap_dir.mkdir(parents=True, exist_ok=True)

    rows: list[TimingRow] = []
    snapshot_paths: list[str] = []
    orchestra = _Orchestra(workers)
    realloc_seen = 0
    try:
        for frame in range(cfg.frames):
            if spec.emission is not None:
                epos, evel = spec.emission.sample(frame)
                ids = np.arange(next_id, next_id + len(epos), dtype=np.int64)
                next_id += len(epos)
                for w, sl in zip(workers, _split_even(len(epos), cfg.workers)):
                    w.append_particles(epos[sl], evel[sl], spec.particle_mass,
                                       ids=ids[sl])
            t0 = time.perf_counter()
            orchestra.run_one_frame(frame, timeout=max(cfg.barrier_timeout * 6, 120.0))
            ms_total = (time.perf_counter() - t0) * 1e3
            steps = workers[0].frame_steps
            lo = workers[0]._global_step - steps
            rebuild_steps = set()
            for w in workers:
                rebuild_steps.update(s for s in w.rebuild_steps if s >= lo)
            phase = {k: float(np.mean([w.phase_ms[k] for w in workers]))
                     for k in ("rebuild", "sort", "p2g", "grid", "g2p")}
            realloc_now = sum(w.realloc_count for w in workers)
            row = TimingRow(
                frame=frame, steps=steps, ms_total=ms_total,
                ms_rebuild=phase["rebuild"], ms_sort=phase["sort"],
                ms_p2g=phase["p2g"], ms_grid=phase["grid"],
                ms_g2p=phase["g2p"], rebuild_count=len(rebuild_steps),
                realloc_count=realloc_now - realloc_seen, workers=cfg.workers,
                particle_count=sum(w.store.count for w in workers))
            realloc_seen = realloc_now
            rows.append(row)
            if csv_writer is not None:
                csv_writer.writerow(row.as_list())
                csv_fh.flush()
            if snap_dir is not None:
                path = snap_dir / f"frame_{frame:04d}.mpmf"
                write_snapshot(path, _gather_snapshot_positions(workers))
                snapshot_paths.append(str(path))
    finally:
        orchestra.shutdown()
        if csv_fh is not None:
            csv_fh.close()

    gaps: list[int] = []
    for w in workers:
        s = w.rebuild_steps
        gaps.extend(int(b - a) for a, b in zip(s, s[1:]))
    conservation = []
    for w in workers:
        conservation.extend(w.conservation)
    counters = np.sum([w.counters for w in workers], axis=0)
    mean_ms = float(np.mean([r.ms_total for r in rows])) if rows else 0.0
    return RunResult(rows=rows, workers=workers, mean_ms_per_frame=mean_ms,
                     rebuild_gaps=gaps,
                     particle_count=sum(w.store.count for w in workers),
                     conservation=conservation, counters=counters,
                     snapshot_paths=snapshot_paths)


def run_efficiency(cfg: RunConfig, max_workers: int,
                   warmup: bool = True) -> list[EfficiencyReport]:
    """Paired runs of the identical config at 1..max_workers, reduced to the
    scaling metric e = t1 / (n tn).

    A one-frame throwaway run warms the compiled-kernel caches first so the
    1-worker timing is not inflated by compilation.
    """
    if max_workers < 1:
        raise ConfigError(f"max workers must be >= 1, got {max_workers}")
    if warmup:
        run(cfg.with_overrides(frames=1, out_csv=None, out_snap=None))
    timings = {}
    for n in range(1, max_workers + 1):
        result = run(cfg.with_overrides(workers=n, out_csv=None, out_snap=None))
        timings[n] = result.mean_ms_per_frame
    return [efficiency(timings[1], timings[n], n)
            for n in range(1, max_workers + 1)]
