import numpy as np
import pytest

from cisqg import controls, noise, scheme


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def demo_cp():
    inp = controls.PlannerInput(alpha=0.5, kappa=0.6, gamma=1.0)
    return controls.plan(inp, "demo", a=2, b=2, beta=0.1)


@pytest.fixture(scope="session")
def lattice_cp():
    """Planner b and beta with the lattice-minimal a = 3."""
    inp = controls.PlannerInput(alpha=0.5, kappa=0.6, gamma=1.0)
    return controls.plan(inp, "demo")


@pytest.fixture(scope="session")
def demo_run(demo_cp):
    """One demo noise path and a one-level run with residuals at every frame."""
    grid = scheme.time_grid_for(demo_cp, 1)
    z = noise.generate(noise.NoiseConfig(kind="wiener", delta=-2.2, K=20, seed=1), grid, 256)
    cfg = scheme.SchemeConfig(N=256, levels=1)
    s0 = scheme.init(z, demo_cp, cfg, all_frames=True)
    s1 = scheme.step(s0, demo_cp, cfg, z, all_frames=True)
    return z, cfg, [s0, s1]
