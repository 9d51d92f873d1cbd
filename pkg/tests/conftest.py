import numpy as np
import pytest

from pwass.model import PwaFunction, PwassModel, theta_of
from pwass.simulator import SimConfig, simulate


def random_spd(rng, n, scale=1.0, floor=0.2):
    G = rng.normal(size=(n, n)) * 0.5
    return scale * (G @ G.T + floor * np.eye(n))


def random_model(rng, n_x=2, n_regions=2, n_y=None, n_u=1, q_scale=0.1, r_scale=0.1,
                 a_scale=0.3, continuous=True):
    """A small random PWASS model with a contractive state matrix."""
    n_y = n_x if n_y is None else n_y
    bounds = np.sort(rng.uniform(-3, 3, n_regions + 1))
    bounds += np.arange(n_regions + 1) * 0.5  # keep regions at least 0.5 wide
    slopes = rng.normal(0, a_scale, n_regions)
    if continuous:
        pwa = PwaFunction.from_continuity(slopes, rng.normal(), bounds)
    else:
        pwa = PwaFunction(bounds, slopes, rng.normal(size=n_regions))
    C = rng.normal(size=(n_y, n_x))
    C[0] = 0.0
    C[0, 0] = 1.0
    return PwassModel(
        phi_row=rng.normal(0, a_scale, n_x),
        phi_sub=rng.normal(0, a_scale, n_x - 1),
        f_block=rng.normal(0, a_scale, (n_x - 2, n_x)),
        input_matrix=rng.normal(size=(n_x, n_u)),
        meas_matrix=C,
        process_cov=random_spd(rng, n_x, q_scale),
        meas_cov=random_spd(rng, n_y, r_scale),
        prior_mean=rng.normal(size=n_x),
        prior_cov=random_spd(rng, n_x, 0.5),
        pwa=pwa,
    )


def random_data(rng, model, T, variant="continuous"):
    """Open-loop simulation of ``model`` under Gaussian inputs."""
    u = rng.normal(size=(T, model.n_u))
    return simulate(model, theta_of(model, variant), SimConfig(horizon=T, input_source="file"),
                    rng, inputs=u)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register their verdicts here; printed once at the end of the run
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
