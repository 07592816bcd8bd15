import numpy as np
import pytest

from vdsm.dsm import MixtureModel
from vdsm.numerics import RngStream


def random_mixture(k=3, dim=4, family="weibull", seed=0, perturbation=False, hidden=(6,)):
    """Mixture with every parameter drawn at random (not left at its init)."""
    rng = np.random.default_rng(seed)
    model = MixtureModel(dim, k, family, rng=RngStream(seed), hidden_dims=hidden, perturbation=perturbation)
    for name, p in model.parameters().items():
        p.data[...] = rng.normal(size=p.shape) * (0.5 if name.startswith("dsm.") else 0.4)
    return model


def random_batch(n=8, dim=4, seed=0, censor_frac=0.4):
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(size=(n, dim))
    u = rng.uniform(0.1, 3.0, size=n)
    delta = (rng.uniform(size=n) > censor_frac).astype(int)
    return x, u, delta


@pytest.fixture
def mixture():
    return random_mixture()


# acceptance criteria report one verdict line each at the end of the session
ACCEPTANCE = {}


def record_acceptance(number, status, detail):
    ACCEPTANCE[number] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status} - {detail}")
