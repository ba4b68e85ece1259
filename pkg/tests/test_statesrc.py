from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from crm_shadows.errors import ArgumentError, ConfigError, ValidationError
from crm_shadows.qcore import (
    DensityState,
    exact_entropy,
    partial_trace,
    purity,
    random_density_matrix,
)
from crm_shadows.settings import get_settings
from crm_shadows.statesrc import (
    CircuitSpec,
    IsingSpec,
    _circuit_gates,
    bond_truncate,
    circuit_statevector,
    ising_ground_state,
    ising_hamiltonian,
    load_matrix,
    load_state,
    parse_circuit,
    parse_ising,
    random_circuit_state,
    reference_statevector,
    resolve_prior,
    resolve_prior_state,
    save_matrix,
)


def _overlap(a: np.ndarray, b: np.ndarray) -> float:
    return float(abs(np.vdot(a, b)) ** 2)


def _half_chain_entropy(psi: np.ndarray, n: int) -> float:
    state = DensityState.from_statevector(psi)
    return exact_entropy(partial_trace(state, range(n // 2)))


class TestIsing:
    def test_two_site_energy(self):
        spec = IsingSpec(n=2)
        psi = ising_ground_state(spec)
        energy = np.vdot(psi, ising_hamiltonian(spec) @ psi).real
        assert_allclose(energy, -np.sqrt(5), atol=1e-12)
        assert_allclose(psi.reshape(2, 2), psi.reshape(2, 2).T, atol=1e-12)

    def test_hamiltonian_is_hermitian(self):
        h = ising_hamiltonian(IsingSpec(n=4)).toarray()
        assert_allclose(h, h.T)
        assert_allclose(np.trace(h), 0.0, atol=1e-12)

    def test_half_chain_entropy_grows_with_length(self):
        entropies = [_half_chain_entropy(ising_ground_state(IsingSpec(n=n)), n) for n in (4, 6, 8)]
        assert entropies[0] < entropies[1] < entropies[2]

    @pytest.mark.slow
    def test_half_chain_entropy_twelve_sites(self):
        s8 = _half_chain_entropy(ising_ground_state(IsingSpec(n=8)), 8)
        s12 = _half_chain_entropy(ising_ground_state(IsingSpec(n=12)), 12)
        assert s12 > s8

    def test_lanczos_matches_dense(self, monkeypatch):
        dense = ising_ground_state(IsingSpec(n=6))
        monkeypatch.setenv("CRM_DENSE_EIGENSOLVER_MAX_QUBITS", "4")
        get_settings.cache_clear()
        sparse = ising_ground_state(IsingSpec(n=6))
        assert_allclose(_overlap(dense, sparse), 1.0, atol=1e-8)

    def test_companion_fields(self):
        spec = IsingSpec.companion(6, 0.02, seed=7)
        assert len(spec.epsilons) == 6
        assert all(0.0 <= e <= 0.02 for e in spec.epsilons)
        assert spec == IsingSpec.companion(6, 0.02, seed=7)
        psi = ising_ground_state(spec)
        assert _overlap(psi, ising_ground_state(IsingSpec(n=6))) > 0.98

    def test_zero_companion_fields_reproduce_the_chain(self):
        spec = IsingSpec.companion(6, 0.0, seed=7)
        assert spec.epsilons == (0.0,) * 6
        assert_allclose(ising_ground_state(spec), ising_ground_state(IsingSpec(n=6)), atol=1e-12)

    def test_companion_field_bound(self):
        with pytest.raises(ArgumentError):
            IsingSpec.companion(4, 0.1, seed=0)

    def test_mismatched_fields(self):
        with pytest.raises(ArgumentError):
            IsingSpec(n=3, epsilons=(0.01,)).fields()


class TestBondTruncate:
    def test_full_bond_dimension_is_exact(self):
        psi = ising_ground_state(IsingSpec(n=6))
        assert_allclose(bond_truncate(psi, 8), psi, atol=1e-12)

    def test_bond_dimension_above_the_rank_returns_the_input(self, rng):
        psi = rng.normal(size=32) + 1j * rng.normal(size=32)
        psi /= np.linalg.norm(psi)
        assert_allclose(bond_truncate(psi, 4), psi, atol=1e-12)
        assert_allclose(bond_truncate(psi, 64), psi, atol=1e-12)

    @pytest.mark.parametrize("chi", [1, 2, 3])
    def test_truncating_twice_equals_truncating_once(self, chi):
        once = bond_truncate(ising_ground_state(IsingSpec(n=8)), chi)
        assert_allclose(bond_truncate(once, chi), once, atol=1e-10)

    def test_unit_bond_dimension_is_a_product_state(self):
        psi = ising_ground_state(IsingSpec(n=6))
        product = DensityState.from_statevector(bond_truncate(psi, 1))
        for cut in range(1, 6):
            assert_allclose(purity(partial_trace(product, range(cut))), 1.0, atol=1e-10)

    def test_fidelity_grows_with_bond_dimension(self):
        psi = ising_ground_state(IsingSpec(n=8))
        fidelities = [_overlap(psi, bond_truncate(psi, chi)) for chi in (1, 2, 4, 16)]
        assert fidelities[0] < fidelities[1] < fidelities[2]
        assert_allclose(fidelities[3], 1.0, atol=1e-12)

    @pytest.mark.slow
    def test_fidelity_ordering_sixteen_sites(self):
        psi = ising_ground_state(IsingSpec(n=16))
        fidelities = [_overlap(psi, bond_truncate(psi, chi)) for chi in (1, 2, 3)]
        assert fidelities[0] < fidelities[1] < fidelities[2]

    def test_rejects_zero(self):
        with pytest.raises(ArgumentError):
            bond_truncate(np.eye(4)[0], 0)


class TestCircuits:
    def test_noiseless_circuit_is_pure(self):
        spec = CircuitSpec(n=3, depth=3, p=0.0, seed=4)
        rho = random_circuit_state(spec).matrix
        assert_allclose(purity(rho), 1.0, atol=1e-12)
        psi = circuit_statevector(spec)
        assert_allclose(rho, np.outer(psi, psi.conj()), atol=1e-12)

    def test_full_depolarization(self):
        rho = random_circuit_state(CircuitSpec(n=3, depth=2, p=1.0, seed=4)).matrix
        assert_allclose(rho, np.eye(8) / 8, atol=1e-12)

    def test_purity_decreases_with_noise(self):
        purities = [
            purity(random_circuit_state(CircuitSpec(n=3, depth=3, p=p, seed=1)).matrix)
            for p in (0.0, 0.01, 0.05, 0.2)
        ]
        assert all(b < a for a, b in zip(purities, purities[1:], strict=False))

    def test_purity_decreases_with_noise_six_qubits(self):
        purities = [
            purity(random_circuit_state(CircuitSpec(n=6, depth=4, p=p, seed=2)).matrix)
            for p in (0.0, 1e-3, 1e-2)
        ]
        assert purities[0] > purities[1] > purities[2]

    def test_gates_are_haar_unitaries(self):
        corners = []
        for seed in range(400):
            gates = _circuit_gates(CircuitSpec(n=2, depth=1, p=0.0, seed=seed))
            for qubits, gate in gates:
                assert_allclose(gate @ gate.conj().T, np.eye(gate.shape[0]), atol=1e-12)
                if len(qubits) == 2:
                    corners.append(abs(gate[0, 0]) ** 2)
        assert abs(np.mean(corners) - 0.25) < 0.04

    def test_descriptor(self):
        state = random_circuit_state(CircuitSpec(n=2, depth=1, p=0.1, seed=9))
        assert state.descriptor == "circuit:N=2:d=1:p=0.1:seed=9"
        assert parse_circuit(state.descriptor) == CircuitSpec(n=2, depth=1, p=0.1, seed=9)


class TestMatrixFiles:
    def test_round_trip(self, rng, tmp_path):
        rho = random_density_matrix(2, rng)
        path = tmp_path / "rho.bin"
        save_matrix(rho, path)
        assert path.stat().st_size == 8 + 16 * 16
        np.testing.assert_array_equal(load_matrix(path), rho)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "rho.bin"
        save_matrix(random_density_matrix(1, rng), path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValidationError):
            load_matrix(path)

    def test_rejects_non_square(self, tmp_path):
        with pytest.raises(ArgumentError):
            save_matrix(np.zeros((2, 3)), tmp_path / "x.bin")


class TestDescriptors:
    def test_ising(self):
        state = load_state("ising:N=4")
        assert state.n_qubits == 4
        assert state.descriptor == "ising:N=4"
        assert reference_statevector(state) is state.statevector

    def test_companion_descriptor(self):
        assert parse_ising("ising:N=5:eps=0.02:seed=3") == IsingSpec.companion(5, 0.02, 3)

    def test_circuit_reference(self):
        state = load_state("circuit:N=2:d=2:p=0.05:seed=1")
        reference = reference_statevector(state)
        assert_allclose(reference, circuit_statevector(parse_circuit(state.descriptor)))

    def test_file(self, rng, tmp_path):
        rho = random_density_matrix(2, rng)
        save_matrix(rho, tmp_path / "rho.bin")
        state = load_state(f"file:{tmp_path / 'rho.bin'}")
        assert_allclose(state.matrix, rho)
        assert reference_statevector(state) is None

    @pytest.mark.parametrize(
        "descriptor",
        [
            "spin:N=4",
            "ising",
            "ising:N=x",
            "ising:N=4:chi=2",
            "ising:N4",
            "circuit:N=3:d=2:p=0.1",
            "circuit:N=3:d=2:p=1.5:seed=0",
            "file:",
        ],
    )
    def test_invalid(self, descriptor):
        with pytest.raises(ConfigError) as info:
            load_state(descriptor)
        assert info.value.field == "state"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_state(f"file:{tmp_path / 'missing.bin'}")

    def test_field_is_reported(self):
        with pytest.raises(ConfigError) as info:
            load_state("nothing:N=1", field="target")
        assert info.value.to_dict()["field"] == "target"


class TestResolvePrior:
    def test_none_and_exact(self):
        state = load_state("ising:N=4")
        assert resolve_prior("none", state, [0, 1]) is None
        exact = resolve_prior("exact", state, [1, 2])
        assert exact.support == (1, 2)
        assert_allclose(exact.matrix, partial_trace(state, [1, 2]))

    def test_full_bond_dimension_is_exact(self):
        state = load_state("ising:N=6")
        prior = resolve_prior("mps:chi=full", state, [0, 1, 2])
        assert_allclose(prior.matrix, partial_trace(state, [0, 1, 2]), atol=1e-10)

    def test_truncated_prior_differs(self):
        state = load_state("ising:N=6")
        prior = resolve_prior("mps:chi=1", state, [0, 1, 2])
        assert_allclose(prior.trace, 1.0, atol=1e-12)
        assert_allclose(purity(prior.matrix), 1.0, atol=1e-10)
        assert purity(partial_trace(state, [0, 1, 2])) < 0.99

    def test_explicit_ideal_state(self):
        state = load_state("circuit:N=2:d=1:p=0.1:seed=2")
        ideal = np.array([1, 0, 0, 0], dtype=complex)
        prior = resolve_prior("mps:chi=1", state, [0, 1], ideal=ideal)
        assert_allclose(prior.matrix, np.diag([1, 0, 0, 0]), atol=1e-14)

    def test_state_descriptor(self):
        state = load_state("ising:N=4")
        prior = resolve_prior("ising:N=4:eps=0.02:seed=1", state, [0])
        assert prior.support == (0,)

    @pytest.mark.parametrize("descriptor", ["mps:bond=2", "mps:chi=two", "ising:N=3"])
    def test_invalid(self, descriptor):
        with pytest.raises(ConfigError) as info:
            resolve_prior(descriptor, load_state("ising:N=4"), [0])
        assert info.value.field == "prior"

    def test_mps_needs_a_pure_reference(self, rng):
        state = DensityState.from_matrix(random_density_matrix(2, rng))
        with pytest.raises(ConfigError):
            resolve_prior("mps:chi=1", state, [0])

    def test_register_prior_states(self):
        state = load_state("ising:N=4")
        assert resolve_prior_state("none", state) is None
        assert resolve_prior_state("exact", state) is state
        product = resolve_prior_state("mps:chi=1", state)
        assert product.n_qubits == 4
        assert product.statevector is not None
        assert _overlap(product.statevector, state.statevector) < 1.0

    def test_register_prior_size_checked(self):
        with pytest.raises(ConfigError) as info:
            resolve_prior_state("ising:N=3", load_state("ising:N=4"))
        assert info.value.field == "prior"
