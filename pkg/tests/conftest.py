import numpy as np
import pytest

from gpecm import battery_model as bm
from gpecm import hyperopt as ho
from gpecm import simulator as sim


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def truth():
    return sim.table1_truth()


@pytest.fixture(scope="session")
def short_cycle(truth):
    """A 600 s simulated cycle with its latent states."""
    prof = sim.synth_profile(7, 600, 5.0, -1.5)
    return sim.simulate(truth, prof, 0.9, 25.0, 99)


@pytest.fixture(scope="session")
def short_spec(truth, short_cycle):
    seg, _ = short_cycle
    z_range, i_range = ho.data_ranges([seg], truth.ocv, 1 / 1.09)
    return ho.ModelSpec(z_range, i_range, truth.ocv, truth.thermal)


@pytest.fixture(scope="session")
def reasonable_theta():
    """Hyperparameters near what a stage-1 fit returns on Table I data."""
    return ho.HyperParams(
        sigma_q=0.1, sigma_ab=2.0, sigma_r0=0.27, gamma_ab_z=8.0, gamma_r0_z=3.0, gamma_r0_i=0.12,
        noise_v=0.005, noise_t=0.1, **ho.STAGE1_PLACEHOLDERS,
    )


@pytest.fixture(scope="session")
def ecm_model(reasonable_theta, short_spec):
    return ho.build_model(reasonable_theta, short_spec, zeta_origin=None)


def rel_err(a, b, floor=1e-300):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


@pytest.fixture
def table1_ocv():
    return bm.table1_ocv()
