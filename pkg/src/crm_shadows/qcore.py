"""Dense linear algebra and quantum-state primitives for small qubit registers.

Conventions:
  - Qubits are 0-based. Qubit 0 is the leftmost character of a bitstring,
    setting or Pauli string and the most significant bit of a basis index.
  - Matrices on ``k`` qubits are viewed as tensors of shape ``(2,) * 2k``
    (row axes first, then column axes).
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import reduce
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import NDArray

from crm_shadows.errors import ArgumentError, DimensionError, ResourceError, ValidationError
from crm_shadows.settings import get_settings

if TYPE_CHECKING:
    from crm_shadows.measurement import MeasurementSetting

logger = logging.getLogger(__name__)

ComplexArray = NDArray[np.complex128]
RealArray = NDArray[np.float64]

Bitstring = str

# ---------------------------------------------------------------------------
# Constant single-qubit matrices
# ---------------------------------------------------------------------------

IDENTITY = np.eye(2, dtype=np.complex128)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)

PAULI_MATRICES: dict[str, ComplexArray] = {
    "I": IDENTITY,
    "X": PAULI_X,
    "Y": PAULI_Y,
    "Z": PAULI_Z,
}

# U with U^dagger Z U = Z, X, Y respectively
BASIS_ROTATIONS: dict[str, ComplexArray] = {
    "Z": IDENTITY,
    "X": np.array([[1, 1], [1, -1]], dtype=np.complex128) / np.sqrt(2),
    "Y": np.array([[1, -1j], [1, 1j]], dtype=np.complex128) / np.sqrt(2),
}


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PauliString:
    """Tensor product of single-qubit Paulis, one letter per qubit."""

    letters: str

    def __post_init__(self) -> None:
        if not self.letters or any(ch not in "IXYZ" for ch in self.letters):
            raise ArgumentError(f"Invalid Pauli string: {self.letters!r}")

    def __str__(self) -> str:
        return self.letters

    @property
    def n_qubits(self) -> int:
        return len(self.letters)

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(i for i, ch in enumerate(self.letters) if ch != "I")

    @property
    def n_support(self) -> int:
        return len(self.support)

    def restrict(self, qubits: Sequence[int]) -> str:
        """Letters on ``qubits`` (in the given order)."""
        return "".join(self.letters[q] for q in qubits)

    def matrix(self) -> ComplexArray:
        return kron_all(PAULI_MATRICES[ch] for ch in self.letters)


@dataclass(frozen=True, eq=False)
class DensityState:
    """A physical state: PSD, unit trace, hermitian.

    Pure states keep only their statevector; the dense matrix is built on demand.
    """

    n_qubits: int
    statevector: ComplexArray | None = None
    matrix: ComplexArray | None = None
    descriptor: str = ""

    @classmethod
    def from_statevector(
        cls, psi: Sequence[complex] | ComplexArray, descriptor: str = ""
    ) -> DensityState:
        vec = np.asarray(psi, dtype=np.complex128).reshape(-1)
        n = _qubits_for_dim(vec.shape[0])
        _check_state_cap(n)
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > get_settings().norm_tol:
            raise ValidationError(f"Statevector norm {norm:.12g} is not 1")
        return cls(n_qubits=n, statevector=vec, descriptor=descriptor)

    @classmethod
    def from_matrix(cls, rho: ComplexArray, descriptor: str = "") -> DensityState:
        mat = np.asarray(rho, dtype=np.complex128)
        n = _square_qubits(mat)
        _check_state_cap(n)
        validate_density_matrix(mat)
        return cls(n_qubits=n, matrix=mat, descriptor=descriptor)

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    @property
    def is_pure_vector(self) -> bool:
        return self.statevector is not None

    def density_matrix(self) -> ComplexArray:
        if self.matrix is not None:
            return self.matrix
        assert self.statevector is not None
        if self.n_qubits > get_settings().max_support_qubits:
            raise ResourceError(
                f"Refusing to build a dense {self.n_qubits}-qubit density matrix; "
                "reduce to a support first"
            )
        return np.outer(self.statevector, self.statevector.conj())


@dataclass(frozen=True, eq=False)
class PseudoState:
    """Hermitian prior on a declared qubit support. Trace and positivity are free."""

    support: tuple[int, ...]
    matrix: ComplexArray = field(repr=False)

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=np.complex128)
        if mat.shape != (2 ** len(self.support),) * 2:
            raise DimensionError(
                f"Pseudo-state matrix shape {mat.shape} does not match support {self.support}"
            )
        if len(set(self.support)) != len(self.support):
            raise ArgumentError(f"Repeated qubit in support {self.support}")
        _check_hermitian(mat)
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def zero(cls, support: Sequence[int]) -> PseudoState:
        dim = 2 ** len(support)
        return cls(tuple(support), np.zeros((dim, dim), dtype=np.complex128))

    @classmethod
    def from_state(cls, state: DensityState, support: Sequence[int]) -> PseudoState:
        keep = tuple(sorted(support))
        return cls(keep, partial_trace(state, keep))

    @property
    def n_qubits(self) -> int:
        return len(self.support)

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def reduce(self, keep: Sequence[int]) -> PseudoState:
        """Partial trace onto ``keep`` (global labels, must lie in the support)."""
        keep = tuple(sorted(keep))
        if keep == self.support:
            return self
        missing = set(keep) - set(self.support)
        if missing:
            raise ArgumentError(f"Qubits {sorted(missing)} not in pseudo-state support")
        local = [self.support.index(q) for q in keep]
        return PseudoState(keep, _partial_trace_matrix(self.matrix, self.n_qubits, local))


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def _qubits_for_dim(dim: int) -> int:
    n = int(dim).bit_length() - 1
    if dim < 1 or 2**n != dim:
        raise DimensionError(f"Dimension {dim} is not a power of two")
    return n


def _square_qubits(mat: np.ndarray) -> int:
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {mat.shape}")
    return _qubits_for_dim(mat.shape[0])


def _check_state_cap(n: int) -> None:
    cap = get_settings().max_state_qubits
    if n > cap:
        raise ResourceError(f"{n} qubits exceeds the state cap of {cap}")


def _check_hermitian(mat: np.ndarray) -> None:
    deviation = float(np.max(np.abs(mat - mat.conj().T))) if mat.size else 0.0
    if deviation > get_settings().hermitian_tol:
        raise ValidationError(f"Matrix is not hermitian (max |M - M^dagger| = {deviation:.3g})")


def validate_density_matrix(rho: np.ndarray) -> None:
    """Raise ``ValidationError`` unless ``rho`` is hermitian, unit trace and PSD."""
    settings = get_settings()
    _check_hermitian(rho)
    trace = np.trace(rho).real
    if abs(trace - 1.0) > settings.trace_tol:
        raise ValidationError(f"Trace {trace:.12g} is not 1")
    min_eig = float(np.linalg.eigvalsh(rho)[0])
    if min_eig < -settings.psd_tol:
        raise ValidationError(f"Negative eigenvalue {min_eig:.3g}")


def _check_support(keep: Iterable[int], n: int) -> tuple[int, ...]:
    qubits = tuple(keep)
    if not qubits:
        raise ArgumentError("Support must be nonempty")
    if len(set(qubits)) != len(qubits):
        raise ArgumentError(f"Repeated qubit in {qubits}")
    bad = [q for q in qubits if not 0 <= q < n]
    if bad:
        raise ArgumentError(f"Qubit indices {bad} out of range for {n} qubits")
    return tuple(sorted(qubits))


# ---------------------------------------------------------------------------
# Tensor helpers
# ---------------------------------------------------------------------------


def kron_all(mats: Iterable[np.ndarray]) -> ComplexArray:
    return reduce(np.kron, mats, np.ones((1, 1), dtype=np.complex128))


def _apply_on_axis(tensor: np.ndarray, gate: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(gate, tensor, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def _apply_on_axes(tensor: np.ndarray, gate: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    k = len(axes)
    gate_t = gate.reshape((2,) * (2 * k))
    out = np.tensordot(gate_t, tensor, axes=(list(range(k, 2 * k)), list(axes)))
    return np.moveaxis(out, list(range(k)), list(axes))


def conjugate_by_product(matrix: np.ndarray, gates: Sequence[np.ndarray]) -> ComplexArray:
    """Return ``G M G^dagger`` for ``G`` the tensor product of 2x2 ``gates``."""
    n = len(gates)
    tensor = np.asarray(matrix, dtype=np.complex128).reshape((2,) * (2 * n))
    for q, gate in enumerate(gates):
        if gate is IDENTITY:
            continue
        tensor = _apply_on_axis(tensor, gate, q)
        tensor = _apply_on_axis(tensor, gate.conj(), n + q)
    return tensor.reshape(2**n, 2**n)


def apply_local_unitary(
    state: np.ndarray, gate: np.ndarray, qubits: Sequence[int], n_qubits: int
) -> ComplexArray:
    """Apply ``gate`` on ``qubits`` to a statevector (1-D) or a density matrix (2-D)."""
    qubits = list(qubits)
    if gate.shape != (2 ** len(qubits),) * 2:
        raise DimensionError(f"Gate shape {gate.shape} does not act on {len(qubits)} qubits")
    if state.ndim == 1:
        tensor = state.reshape((2,) * n_qubits)
        return _apply_on_axes(tensor, gate, qubits).reshape(-1)
    tensor = state.reshape((2,) * (2 * n_qubits))
    tensor = _apply_on_axes(tensor, gate, qubits)
    tensor = _apply_on_axes(tensor, gate.conj(), [n_qubits + q for q in qubits])
    return tensor.reshape(2**n_qubits, 2**n_qubits)


def depolarize(rho: np.ndarray, qubit: int, p: float, n_qubits: int) -> ComplexArray:
    """rho -> (1-p) rho + p (1/2 (x) Tr_qubit rho), written as a Pauli twirl."""
    if p == 0.0:
        return rho
    twirl = rho.copy()
    for pauli in (PAULI_X, PAULI_Y, PAULI_Z):
        twirl = twirl + apply_local_unitary(rho, pauli, [qubit], n_qubits)
    return (1.0 - p) * rho + p * twirl / 4.0


def _partial_trace_matrix(matrix: np.ndarray, n: int, keep: Sequence[int]) -> ComplexArray:
    keep = list(keep)
    traced = [q for q in range(n) if q not in keep]
    if keep == list(range(n)):
        return np.array(matrix, dtype=np.complex128, copy=True)
    k, t = len(keep), len(traced)
    tensor = matrix.reshape((2,) * (2 * n))
    tensor = np.transpose(tensor, keep + traced + [n + q for q in keep] + [n + q for q in traced])
    tensor = tensor.reshape(2**k, 2**t, 2**k, 2**t)
    return np.einsum("ajbj->ab", tensor)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def rotation_gates(setting: str | MeasurementSetting) -> list[ComplexArray]:
    return [BASIS_ROTATIONS[ch] for ch in str(setting)]


def rotate_state(
    state: DensityState | PseudoState, setting: str | MeasurementSetting
) -> ComplexArray:
    """Return ``U rho U^dagger`` with ``U`` the product basis rotation of ``setting``."""
    bases = str(setting)
    if len(bases) != state.n_qubits:
        raise DimensionError(
            f"Setting of length {len(bases)} does not match {state.n_qubits} qubits"
        )
    matrix = state.density_matrix() if isinstance(state, DensityState) else state.matrix
    return conjugate_by_product(matrix, rotation_gates(bases))


def rotate_statevector(psi: np.ndarray, setting: str | MeasurementSetting) -> ComplexArray:
    bases = str(setting)
    n = len(bases)
    if psi.shape != (2**n,):
        raise DimensionError(f"Statevector of length {psi.shape[0]} does not match setting {bases}")
    tensor = psi.reshape((2,) * n)
    for q, ch in enumerate(bases):
        if ch != "Z":
            tensor = _apply_on_axis(tensor, BASIS_ROTATIONS[ch], q)
    return tensor.reshape(-1)


def partial_trace(
    state: DensityState | PseudoState | np.ndarray, keep: Iterable[int]
) -> ComplexArray:
    """Reduced matrix on ``keep`` (qubits returned in ascending order)."""
    if isinstance(state, PseudoState):
        return state.reduce(_check_support(keep, max(state.support) + 1)).matrix
    if isinstance(state, DensityState):
        qubits = list(_check_support(keep, state.n_qubits))
        if state.statevector is not None:
            n = state.n_qubits
            cap = get_settings().max_support_qubits
            if len(qubits) > cap:
                raise ResourceError(
                    f"Reduced state on {len(qubits)} qubits exceeds the support cap of {cap}"
                )
            traced = [q for q in range(n) if q not in qubits]
            tensor = np.transpose(state.statevector.reshape((2,) * n), qubits + traced)
            amp = tensor.reshape(2 ** len(qubits), -1)
            return amp @ amp.conj().T
        assert state.matrix is not None
        return _partial_trace_matrix(state.matrix, state.n_qubits, qubits)
    mat = np.asarray(state, dtype=np.complex128)
    n = _square_qubits(mat)
    return _partial_trace_matrix(mat, n, list(_check_support(keep, n)))


def pauli_expectation(state: DensityState | PseudoState | np.ndarray, pauli: PauliString) -> float:
    """``Tr(gamma rho)``, evaluated on the support of ``gamma``."""
    if isinstance(state, PseudoState):
        n = max(state.support) + 1 if state.support else 0
        if pauli.n_qubits < n:
            raise DimensionError(f"Pauli string {pauli} too short for support {state.support}")
        support = pauli.support
        if not support:
            return state.trace
        reduced = state.reduce(support).matrix
    else:
        n = state.n_qubits if isinstance(state, DensityState) else _square_qubits(np.asarray(state))
        if pauli.n_qubits != n:
            raise DimensionError(f"Pauli string {pauli} does not match {n} qubits")
        support = pauli.support
        if not support:
            if isinstance(state, DensityState):
                return 1.0
            return float(np.trace(state).real)
        reduced = partial_trace(state, support)
    op = kron_all(PAULI_MATRICES[pauli.letters[q]] for q in support)
    return float(np.trace(op @ reduced).real)


def _spectrum(rho_a: np.ndarray) -> RealArray:
    eigs = np.linalg.eigvalsh(np.asarray(rho_a, dtype=np.complex128))
    if eigs[0] < -get_settings().psd_tol:
        raise ValidationError(f"Negative eigenvalue {eigs[0]:.3g} in density matrix")
    return np.clip(eigs, 0.0, 1.0)


def exact_entropy(rho_a: np.ndarray) -> float:
    """Von Neumann entropy (natural log), with 0 log 0 := 0."""
    eigs = _spectrum(rho_a)
    nonzero = eigs[eigs > 0.0]
    return float(max(-np.sum(nonzero * np.log(nonzero)), 0.0))


def exact_trace_moment(rho_a: np.ndarray, n: int) -> float:
    """``Tr(rho_A^n)`` from the spectrum."""
    if n < 1:
        raise ArgumentError(f"Moment order must be >= 1, got {n}")
    return float(np.sum(_spectrum(rho_a) ** n))


def purity(rho: np.ndarray) -> float:
    return float(np.real(np.vdot(rho, rho)))


def hs_norm(matrix: np.ndarray) -> float:
    """Hilbert-Schmidt norm ``sqrt(Tr(M^dagger M))``."""
    return float(np.linalg.norm(matrix, ord="fro"))


# ---------------------------------------------------------------------------
# Random test objects
# ---------------------------------------------------------------------------


def random_density_matrix(
    n_qubits: int, rng: np.random.Generator, rank: int | None = None
) -> ComplexArray:
    """Induced-measure random density matrix of the given rank (full rank by default)."""
    dim = 2**n_qubits
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_pseudo_state(
    support: Sequence[int], rng: np.random.Generator, trace: float | None = None
) -> PseudoState:
    """Random hermitian matrix, generally indefinite; trace is set when given."""
    dim = 2 ** len(support)
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    h = (g + g.conj().T) / (2 * dim)
    if trace is not None:
        h = h + (trace - np.trace(h).real) * np.eye(dim) / dim
    return PseudoState(tuple(support), h)
