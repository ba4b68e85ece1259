from __future__ import annotations

import numpy as np
import pytest

from crm_shadows.measurement import all_settings, exact_dataset
from crm_shadows.qcore import DensityState, random_density_matrix
from crm_shadows.settings import get_settings


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


@pytest.fixture(autouse=True)
def _fresh_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


def mixed_state(n_qubits: int, rng: np.random.Generator) -> DensityState:
    """Full-rank random state stored as a dense matrix."""
    return DensityState.from_matrix(random_density_matrix(n_qubits, rng))


def bell_state() -> DensityState:
    return DensityState.from_statevector(np.array([1, 0, 0, 1]) / np.sqrt(2))


def exhaustive(state: DensityState):
    """Exact-mode dataset over every local setting."""
    return exact_dataset(state, all_settings(state.n_qubits))
