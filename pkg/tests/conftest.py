import numpy as np
import pytest

from calciflow import dae, plant


@pytest.fixture(scope="session")
def desk_plant():
    return plant.Plant(plant.default_description())


@pytest.fixture(scope="session")
def hot_state(desk_plant):
    """Driven loop marched to (near) steady operation at 1 MW."""
    pl = desk_plant
    st = pl.initial_state()
    cfg = dae.SolverConfig(dt=2.0, newton_tol=1e-9)
    stepper = pl.make_stepper(st, cfg)
    for frac in np.linspace(0.1, 1.0, 10):
        st.u[:] = [0.45 * frac, 1.0e6 * frac, 3000.0 * frac]
        for _ in range(15):
            st = pl.step(st, cfg, stepper)
    cfg5 = dae.SolverConfig(dt=5.0, newton_tol=1e-9)
    stepper5 = pl.make_stepper(st, cfg5)
    for _ in range(240):
        st = pl.step(st, cfg5, stepper5)
    return st
