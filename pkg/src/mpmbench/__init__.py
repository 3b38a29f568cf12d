"""Data-parallel explicit MLS-MPM engine with a sparse paged grid, a
multi-worker runtime, and an ablation benchmark harness."""

from .domain import (Material, MaterialKind, SimParams, WeightStencil, cfl_dt,
                     quadratic_weights, stress_fixed_corotated, stress_fluid)
from .memory import GrowBuffer, ScratchPool
from .grid import (BlockHashTable, BlockTable, GridStore, block_of,
                   build_block_tables, decode, encode)
from .particles import (ParticleStore, lane_radix_sort10, particle_code,
                        stable_counting_sort)
from .pipeline import (BoundaryBox, PipelineOptions, StepFlags, Worker,
                       free_zone_check)
from .multiworker import (EfficiencyReport, SharedRuntime, SpinBarrier,
                          efficiency, partition_particles, tag_shared_blocks)
from .bench import (RunConfig, TimingRow, gen_fountain_lite, gen_sand_blocks,
                    read_snapshot, run, run_efficiency, write_snapshot)

__all__ = [
    "Material", "MaterialKind", "SimParams", "WeightStencil", "cfl_dt",
    "quadratic_weights", "stress_fixed_corotated", "stress_fluid",
    "GrowBuffer", "ScratchPool",
    "BlockHashTable", "BlockTable", "GridStore", "block_of",
    "build_block_tables", "decode", "encode",
    "ParticleStore", "lane_radix_sort10", "particle_code",
    "stable_counting_sort",
    "BoundaryBox", "PipelineOptions", "StepFlags", "Worker", "free_zone_check",
    "EfficiencyReport", "SharedRuntime", "SpinBarrier", "efficiency",
    "partition_particles", "tag_shared_blocks",
    "RunConfig", "TimingRow", "gen_fountain_lite", "gen_sand_blocks",
    "read_snapshot", "run", "run_efficiency", "write_snapshot",
]

__version__ = "0.1.0"
