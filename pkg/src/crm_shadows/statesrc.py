"""Test states: critical Ising ground states, bond-truncated approximations and noisy circuits.

State descriptors::

    ising:N=16
    ising:N=12:eps=0.02:seed=7          # companion fields eps_i ~ U[0, eps]
    circuit:N=8:d=4:p=0.001:seed=3
    file:<path>                         # dense matrix, see ``save_matrix``

Prior descriptors add ``none``, ``exact`` and ``mps:chi=K`` (``K`` an integer or
``full``) to the state descriptors above.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as ModelError
from scipy.sparse.linalg import eigsh
from scipy.stats import unitary_group

from crm_shadows.errors import ArgumentError, ConfigError, ResourceError, ValidationError
from crm_shadows.qcore import (
    ComplexArray,
    DensityState,
    PseudoState,
    apply_local_unitary,
    depolarize,
)
from crm_shadows.settings import get_settings

logger = logging.getLogger(__name__)

COMPANION_EPS_MAX = 0.02

Gate = tuple[tuple[int, ...], np.ndarray]


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


class IsingSpec(BaseModel):
    """Open critical Ising chain ``H = -sum Z_i Z_{i+1} - sum X_i + sum eps_i Z_i``."""

    model_config = ConfigDict(frozen=True)

    n: int = Field(ge=1)
    epsilons: tuple[float, ...] = ()

    @classmethod
    def companion(cls, n: int, eps_max: float, seed: int) -> IsingSpec:
        """Chain with per-site fields drawn uniformly from ``[0, eps_max]``."""
        if not 0.0 <= eps_max <= COMPANION_EPS_MAX:
            raise ArgumentError(f"Companion field bound must lie in [0, {COMPANION_EPS_MAX}]")
        rng = np.random.default_rng(seed)
        return cls(n=n, epsilons=tuple(float(e) for e in rng.uniform(0.0, eps_max, size=n)))

    def fields(self) -> np.ndarray:
        if not self.epsilons:
            return np.zeros(self.n)
        if len(self.epsilons) != self.n:
            raise ArgumentError(f"{len(self.epsilons)} field offsets for {self.n} sites")
        return np.asarray(self.epsilons, dtype=np.float64)


class CircuitSpec(BaseModel):
    """Brickwork of Haar gates; each gate is followed by depolarizing its qubits."""

    model_config = ConfigDict(frozen=True)

    n: int = Field(ge=1)
    depth: int = Field(ge=1)
    p: float = Field(ge=0.0, le=1.0)
    seed: int = Field(ge=0)


# ---------------------------------------------------------------------------
# Ising chain
# ---------------------------------------------------------------------------


def ising_hamiltonian(spec: IsingSpec) -> sparse.csr_matrix:
    """Sparse Hamiltonian in the computational basis (qubit 0 is the most significant bit)."""
    n = spec.n
    cap = get_settings().max_state_qubits
    if n > cap:
        raise ResourceError(f"Ising chain of {n} sites exceeds the cap of {cap}")
    dim = 2**n
    index = np.arange(dim)
    shifts = n - 1 - np.arange(n)
    z = 1.0 - 2.0 * ((index[:, None] >> shifts[None, :]) & 1)
    diagonal = -np.sum(z[:, :-1] * z[:, 1:], axis=1) + z @ spec.fields()

    rows = [index]
    cols = [index]
    vals = [diagonal]
    for shift in shifts:
        rows.append(index ^ (1 << int(shift)))
        cols.append(index)
        vals.append(-np.ones(dim))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
    )


def ising_ground_state(spec: IsingSpec) -> ComplexArray:
    """Normalized ground state; dense ``eigh`` up to the threshold, Lanczos beyond."""
    hamiltonian = ising_hamiltonian(spec)
    if spec.n <= get_settings().dense_eigensolver_max_qubits:
        _, vecs = scipy.linalg.eigh(hamiltonian.toarray(), subset_by_index=[0, 0])
        ground = vecs[:, 0]
    else:
        _, vecs = eigsh(hamiltonian, k=1, which="SA", tol=1e-12)
        ground = vecs[:, 0]
    ground = ground / np.linalg.norm(ground)
    pivot = int(np.argmax(np.abs(ground)))
    ground = ground * np.sign(ground[pivot])
    logger.debug("Ising ground state for N=%d", spec.n)
    return ground.astype(np.complex128)


def bond_truncate(psi: np.ndarray, chi: int) -> ComplexArray:
    """Left-to-right SVD sweep keeping ``chi`` singular values per bond, then renormalize."""
    if chi < 1:
        raise ArgumentError(f"Bond dimension must be >= 1, got {chi}")
    vec = np.asarray(psi, dtype=np.complex128).reshape(-1)
    n = vec.shape[0].bit_length() - 1
    if n < 2:
        return vec / np.linalg.norm(vec)

    left = np.ones((1, 1), dtype=np.complex128)
    rest = vec.reshape(1, -1)
    rank = 1
    for _ in range(n - 1):
        u, s, vt = np.linalg.svd(rest.reshape(rank * 2, -1), full_matrices=False)
        keep = min(chi, s.size)
        u, s, vt = u[:, :keep], s[:keep], vt[:keep]
        left = (left @ u.reshape(rank, 2 * keep)).reshape(-1, keep)
        rest = s[:, None] * vt
        rank = keep
    out = (left @ rest).reshape(-1)
    return out / np.linalg.norm(out)


# ---------------------------------------------------------------------------
# Random circuits
# ---------------------------------------------------------------------------


def _circuit_gates(spec: CircuitSpec) -> list[Gate]:
    """Gate list of ``depth`` rounds: 1-qubit Haar layer, then a brickwork 2-qubit Haar layer."""
    rng = np.random.default_rng(spec.seed)
    gates: list[Gate] = []
    for layer in range(spec.depth):
        for q in range(spec.n):
            gates.append(((q,), unitary_group.rvs(2, random_state=rng)))
        for q in range(layer % 2, spec.n - 1, 2):
            gates.append(((q, q + 1), unitary_group.rvs(4, random_state=rng)))
    return gates


def circuit_statevector(spec: CircuitSpec) -> ComplexArray:
    """Noiseless output of the same gate sequence as ``random_circuit_state``."""
    cap = get_settings().max_state_qubits
    if spec.n > cap:
        raise ResourceError(f"Circuit of {spec.n} qubits exceeds the cap of {cap}")
    psi = np.zeros(2**spec.n, dtype=np.complex128)
    psi[0] = 1.0
    for qubits, gate in _circuit_gates(spec):
        psi = apply_local_unitary(psi, gate, qubits, spec.n)
    return psi / np.linalg.norm(psi)


def random_circuit_state(spec: CircuitSpec) -> DensityState:
    cap = get_settings().max_density_qubits
    if spec.n > cap:
        raise ResourceError(f"Density-matrix evolution of {spec.n} qubits exceeds the cap of {cap}")
    dim = 2**spec.n
    rho = np.zeros((dim, dim), dtype=np.complex128)
    rho[0, 0] = 1.0
    for qubits, gate in _circuit_gates(spec):
        rho = apply_local_unitary(rho, gate, qubits, spec.n)
        for q in qubits:
            rho = depolarize(rho, q, spec.p, spec.n)
    rho = (rho + rho.conj().T) / 2
    descriptor = f"circuit:N={spec.n}:d={spec.depth}:p={spec.p}:seed={spec.seed}"
    return DensityState.from_matrix(rho / np.trace(rho).real, descriptor)


# ---------------------------------------------------------------------------
# Dense matrix files
# ---------------------------------------------------------------------------


def save_matrix(matrix: np.ndarray, path: str | Path) -> None:
    """8-byte little-endian dimension, then row-major little-endian complex128 entries."""
    mat = np.asarray(matrix, dtype=np.complex128)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ArgumentError(f"Expected a square matrix, got shape {mat.shape}")
    header = np.array([mat.shape[0]], dtype="<u8").tobytes()
    Path(path).write_bytes(header + np.ascontiguousarray(mat, dtype="<c16").tobytes())


def load_matrix(path: str | Path) -> ComplexArray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValidationError(f"Matrix file {path} has no header")
    dim = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    data = np.frombuffer(raw[8:], dtype="<c16")
    if data.size != dim * dim:
        raise ValidationError(f"Matrix file {path} holds {data.size} entries, expected {dim}^2")
    return data.reshape(dim, dim).astype(np.complex128)


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


def _parse_fields(descriptor: str, field: str) -> tuple[str, dict[str, str]]:
    kind, _, rest = descriptor.strip().partition(":")
    params: dict[str, str] = {}
    for part in filter(None, rest.split(":")):
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(field, f"malformed parameter {part!r} in {descriptor!r}")
        params[key.strip()] = value.strip()
    return kind.strip().lower(), params


def _require(params: dict[str, str], keys: Sequence[str], descriptor: str, field: str) -> None:
    missing = [k for k in keys if k not in params]
    unknown = sorted(set(params) - set(keys) - {"eps", "seed"})
    if missing:
        raise ConfigError(field, f"{descriptor!r} lacks {', '.join(missing)}")
    if unknown:
        raise ConfigError(field, f"{descriptor!r} has unknown parameters {', '.join(unknown)}")


def parse_ising(descriptor: str, field: str = "state") -> IsingSpec:
    _, params = _parse_fields(descriptor, field)
    _require(params, ["N"], descriptor, field)
    try:
        n = int(params["N"])
        if "eps" in params:
            return IsingSpec.companion(n, float(params["eps"]), int(params.get("seed", "0")))
        return IsingSpec(n=n)
    except (ValueError, ModelError) as exc:
        raise ConfigError(field, f"invalid Ising descriptor {descriptor!r}: {exc}") from exc


def parse_circuit(descriptor: str, field: str = "state") -> CircuitSpec:
    _, params = _parse_fields(descriptor, field)
    _require(params, ["N", "d", "p", "seed"], descriptor, field)
    try:
        return CircuitSpec(
            n=int(params["N"]),
            depth=int(params["d"]),
            p=float(params["p"]),
            seed=int(params["seed"]),
        )
    except (ValueError, ModelError) as exc:
        raise ConfigError(field, f"invalid circuit descriptor {descriptor!r}: {exc}") from exc


def load_state(descriptor: str, field: str = "state") -> DensityState:
    """Build the ``DensityState`` a descriptor names."""
    if descriptor.startswith("file:"):
        kind = "file"
    else:
        kind, _ = _parse_fields(descriptor, field)
    match kind:
        case "ising":
            spec = parse_ising(descriptor, field)
            return DensityState.from_statevector(ising_ground_state(spec), descriptor)
        case "circuit":
            return random_circuit_state(parse_circuit(descriptor, field))
        case "file":
            path = descriptor.partition(":")[2]
            if not path:
                raise ConfigError(field, "file descriptor without a path")
            try:
                return DensityState.from_matrix(load_matrix(path), descriptor)
            except OSError as exc:
                raise ConfigError(field, f"cannot read {path}: {exc}") from exc
        case _:
            raise ConfigError(field, f"unknown state kind {kind!r} in {descriptor!r}")


def reference_statevector(state: DensityState) -> ComplexArray | None:
    """Ideal pure state behind ``state``: itself if pure, the noiseless circuit output otherwise."""
    if state.statevector is not None:
        return state.statevector
    if state.descriptor.startswith("circuit:"):
        return circuit_statevector(parse_circuit(state.descriptor))
    return None


def resolve_prior_state(
    descriptor: str, state: DensityState, ideal: np.ndarray | None = None
) -> DensityState | None:
    """The register-wide state a prior descriptor names (``None`` for no prior).

    ``mps:`` priors are pure; ``exact`` is ``state`` itself.
    """
    text = descriptor.strip()
    if text.lower() == "none":
        return None
    if text.lower() == "exact":
        return state
    if text.lower().startswith("mps:"):
        _, params = _parse_fields(text, "prior")
        chi_text = params.get("chi")
        if chi_text is None:
            raise ConfigError("prior", f"{descriptor!r} lacks chi")
        vec = ideal if ideal is not None else reference_statevector(state)
        if vec is None:
            raise ConfigError("prior", f"no pure reference state to truncate for {descriptor!r}")
        if chi_text.lower() == "full":
            chi = 2 ** (state.n_qubits // 2)
        else:
            try:
                chi = int(chi_text)
            except ValueError as exc:
                raise ConfigError("prior", f"invalid bond dimension {chi_text!r}") from exc
        return DensityState.from_statevector(bond_truncate(vec, chi), text)
    other = load_state(text, field="prior")
    if other.n_qubits != state.n_qubits:
        raise ConfigError(
            "prior", f"{descriptor!r} has {other.n_qubits} qubits, not {state.n_qubits}"
        )
    return other


def resolve_prior(
    descriptor: str,
    state: DensityState,
    support: Sequence[int],
    ideal: np.ndarray | None = None,
) -> PseudoState | None:
    """Turn a prior descriptor into a ``PseudoState`` on ``support`` (``None`` for no prior)."""
    prior = resolve_prior_state(descriptor, state, ideal)
    return None if prior is None else PseudoState.from_state(prior, support)
