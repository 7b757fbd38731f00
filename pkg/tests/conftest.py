import numpy as np
import pytest

from fuzzyp300.model import ModelDims, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def toy_model():
    """2-channel, 8-sample model small enough for finite differences."""
    dims = ModelDims(2, 8, n_rules_spatial=3, n_rules_temporal=2, latent_dim=3, hidden=5, dropout=0.25)
    return init_model(dims, seed=3)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})")
