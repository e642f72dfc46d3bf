import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ionctrl.hilbert import IonChainSpec, ThermalSpec, thermal_state

MHZ = 2 * np.pi * 1e6


@pytest.fixture
def chain2():
    """Two-ion chain with small cutoffs for fast tests."""
    eta = 0.136
    eta2 = eta / 3 ** 0.25
    return IonChainSpec(
        n_ions=2,
        mode_freqs=[1.0 * MHZ, np.sqrt(3) * MHZ],
        lamb_dicke=[[eta, eta2], [eta, -eta2]],
        fock_cutoff=(3, 3),
    )


@pytest.fixture
def chain1():
    """One-ion toy chain."""
    return IonChainSpec(1, [1.0 * MHZ], [[0.1]], (4,))


@pytest.fixture
def thermal2(chain2):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # cutoff 3 at nbar 0.1 renormalizes visibly
        return thermal_state(ThermalSpec([0.1, 0.1]), chain2)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance scenario")
