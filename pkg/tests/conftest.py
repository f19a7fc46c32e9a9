import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cvae.model import CvaeModel

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_cvae(input_dim=16, s_dim=2, z_dim=3, seed=3, zero_bias=False, recon_model="bernoulli", hidden_dim=8, disc_seed=1):
    """A small model whose discriminator is not at its (inert) zero init."""
    model = CvaeModel.initialize(input_dim, s_dim, z_dim, seed=seed, zero_bias=zero_bias, recon_model=recon_model, hidden_dim=hidden_dim)
    if disc_seed is not None:
        r = np.random.default_rng(disc_seed)
        model.layers["disc"].weights[:] = r.normal(0.0, 0.5, model.layers["disc"].weights.shape)
        model.layers["disc"].bias[:] = 0.1
    return model


ACCEPTANCE = []


def record_criterion(number, title, passed, detail):
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
