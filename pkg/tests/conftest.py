import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mini_config(**overrides):
    """The small falling-boxes scene used by the acceptance oracles."""
    from mpmbench import RunConfig
    base = dict(scene="sand_blocks", l=12, boxes=4, ppc=8, frames=3, workers=1)
    base.update(overrides)
    return RunConfig(**base)


def make_single_worker(particles, velocities=None, *, material=None,
                       params=None, boundary=None, mass=1.0, **options):
    """One worker plus its solo runtime, seeded and ready to step."""
    from mpmbench import Material, SimParams, SharedRuntime
    from mpmbench.pipeline import PipelineOptions, Worker

    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if velocities is None:
        velocities = np.zeros_like(particles)
    if material is None:
        material = Material.fixed_corotated(2.0, 1.0e5, 0.3)
    if params is None:
        params = SimParams(dx=0.5, dt=1e-4)
    runtime = SharedRuntime(1, initial_vmax=float(
        np.linalg.norm(velocities, axis=1).max()) if len(particles) else 0.0)
    w = Worker(0, runtime, params, material, boundary, PipelineOptions(**options))
    if len(particles):
        w.seed_particles(particles, velocities, mass,
                         ids=np.arange(len(particles)))
    w.dt = params.dt
    return w
