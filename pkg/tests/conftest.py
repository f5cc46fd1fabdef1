import numpy as np
import pytest

from dynln.recurrent import StackConfig
from dynln.train import init_model


def tiny_config(**kw):
    base = dict(num_layers=2, cell_size=8, proj_size=4, input_dim=5, num_classes=3,
                dln_enabled=False, summary_size=3)
    base.update(kw)
    return StackConfig(**base)


def randomize(model, seed=0, scale=0.5):
    """Replace every parameter with Gaussian noise (init leaves LN params trivial)."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data[...] = scale * rng.standard_normal(p.shape)
        if p.ndim == 1:
            p.data += 1.0
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_static():
    return randomize(init_model(tiny_config(), seed=0), seed=1)


@pytest.fixture
def tiny_dln():
    return randomize(init_model(tiny_config(dln_enabled=True, lam=10.0), seed=0), seed=2)


# acceptance report: one line per criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
