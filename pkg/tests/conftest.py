import numpy as np
import pytest

from dhnopt.network import PipeArc


@pytest.fixture
def fig_pipe():
    """The single-pipe reference parameter set used throughout the tests:
    h_c = 0.5 W/(m2 K), lambda = 0.017, D = 0.107 m, L = 1000 m,
    T_W = 278 K."""
    return PipeArc("fig", "u", "v", 1000.0, 0.107, 0.017, 0.0, 0.5, 278.0,
                   -50.0, 50.0)


def random_pipe(rng: np.random.Generator) -> PipeArc:
    """Draw a pipe from the documented parameter ranges."""
    return PipeArc(
        "rnd", "u", "v",
        length=float(rng.uniform(100.0, 2000.0)),
        diameter=float(rng.uniform(0.05, 0.3)),
        friction=float(rng.uniform(0.01, 0.03)),
        slope=0.0,
        heat_transfer=float(rng.uniform(0.1, 1.0)),
        wall_temperature=float(rng.uniform(273.0, 288.0)),
        flow_min=-50.0, flow_max=50.0,
    )


def random_flow_state(rng: np.random.Generator):
    """(velocity, inflow energy) from the documented ranges."""
    v = float(rng.uniform(0.1, 3.0)) * (1 if rng.uniform() < 0.5 else -1)
    e_in = float(rng.uniform(0.2e9, 0.5e9))
    return v, e_in
