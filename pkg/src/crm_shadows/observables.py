"""Estimators for Pauli strings, trace moments, fidelities and entropy polynomials.

The entropy polynomial ``f_K(x) = sum_n a_n x^n`` is the least-squares fit of
``f(x) = -x log x`` on ``[0, 1]``. Its coefficients solve a Cauchy system whose
inverse is known in closed form.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from functools import lru_cache
from typing import Annotated

import numpy as np
import sympy as sp
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize_scalar

from crm_shadows.errors import (
    ArgumentError,
    DimensionError,
    SingularityError,
    ValidationError,
)
from crm_shadows.measurement import (
    Dataset,
    MeasurementRecord,
    born_probabilities,
    record_marginal,
)
from crm_shadows.qcore import (
    PAULI_MATRICES,
    ComplexArray,
    DensityState,
    PauliString,
    PseudoState,
    RealArray,
    _partial_trace_matrix,
    _spectrum,
    kron_all,
    pauli_expectation,
    rotate_statevector,
)
from crm_shadows.settings import get_settings
from crm_shadows.shadows import (
    BatchShadow,
    Snapshot,
    build_crm_snapshot,
    build_rho_snapshot,
    diagonal_inverse_apply,
    make_batches,
    ustatistic_leave_one_out,
)

logger = logging.getLogger(__name__)

MAX_POLY_ORDER = 12


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class EstimateReport(BaseModel):
    """Estimator value with its standard error; ``stderr=None`` marks it undefined."""

    model_config = ConfigDict(frozen=True)

    value: float
    stderr: Annotated[float, Field(ge=0.0)] | None = None
    n_u: int = Field(ge=0)
    n_m: int | None = None

    @classmethod
    def from_values(
        cls,
        values: Sequence[float] | RealArray,
        n_u: int,
        n_m: int | None,
        value: float | None = None,
    ) -> EstimateReport:
        """Mean of per-unitary contributions with ``std / sqrt(N)``."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            raise ArgumentError("No contributions to report")
        stderr: float | None
        if arr.size < 2:
            stderr = None
        elif np.ptp(arr) == 0.0:
            stderr = 0.0
        else:
            stderr = float(np.std(arr, ddof=1) / np.sqrt(arr.size))
        mean = float(np.mean(arr)) if value is None else float(value)
        return cls(value=mean, stderr=stderr, n_u=n_u, n_m=n_m)

    @classmethod
    def from_leave_out(
        cls,
        value: float,
        replicates: Sequence[float] | RealArray | None,
        n_u: int,
        n_m: int | None,
    ) -> EstimateReport:
        """Delete-one jackknife: ``stderr^2 = (N - 1) / N * sum_r (theta_(r) - mean)^2``."""
        stderr: float | None = None
        if replicates is not None:
            arr = np.asarray(replicates, dtype=np.float64)
            if arr.size >= 2:
                spread = 0.0 if np.ptp(arr) == 0.0 else np.sum((arr - arr.mean()) ** 2)
                stderr = float(np.sqrt((arr.size - 1) / arr.size * spread))
        return cls(value=float(value), stderr=stderr, n_u=n_u, n_m=n_m)


# ---------------------------------------------------------------------------
# Multi-copy observables
# ---------------------------------------------------------------------------


class Representation(StrEnum):
    PAULI = "pauli"
    SHIFT = "shift"
    PROJECTOR = "projector"
    DENSE = "dense"


def shift_operator(n: int, n_a: int) -> ComplexArray:
    """Dense cyclic shift on ``n`` copies of ``n_a`` qubits: ``|s1 s2..sn> -> |s2..sn s1>``."""
    if n < 1 or n_a < 0:
        raise ArgumentError(f"Invalid shift operator shape n={n}, n_a={n_a}")
    d = 2**n_a
    total = d**n
    index = np.arange(total).reshape((d,) * n)
    rows = np.moveaxis(index, -1, 0).reshape(-1)
    tau = np.zeros((total, total), dtype=np.complex128)
    tau[rows, np.arange(total)] = 1.0
    return tau


def cyclic_trace(mats: Sequence[np.ndarray]) -> complex:
    """``Tr[tau (A_1 x ... x A_n)] = Tr(A_1 A_2 ... A_n)`` without building ``tau``."""
    ordered = list(mats)
    if not ordered:
        raise ArgumentError("cyclic_trace needs at least one matrix")
    if len(ordered) == 1:
        return complex(np.trace(ordered[0]))
    head = ordered[0] if len(ordered) == 2 else np.linalg.multi_dot(ordered[:-1])
    return complex(np.einsum("ij,ji->", head, ordered[-1]))


@dataclass(frozen=True, eq=False)
class MultiCopyObservable:
    """An operator ``O`` on ``copies`` copies of the qubits in ``support``.

    ``pauli`` means ``gamma`` on every copy; ``shift`` the cyclic permutation;
    ``projector`` a single-copy ``|psi><psi|``; ``dense`` an explicit matrix with
    copy-major ordering, not necessarily hermitian (the dense shift is a permutation).
    """

    copies: int
    support: tuple[int, ...]
    representation: Representation
    pauli: PauliString | None = None
    statevector: ComplexArray | None = field(default=None, repr=False)
    matrix: ComplexArray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.copies < 1:
            raise ArgumentError(f"copies must be >= 1, got {self.copies}")
        if list(self.support) != sorted(set(self.support)):
            raise ArgumentError(f"Support {self.support} must be sorted and distinct")
        match self.representation:
            case Representation.SHIFT if self.copies < 2:
                raise ArgumentError("The cyclic shift needs at least two copies")
            case Representation.PROJECTOR if self.copies != 1:
                raise ArgumentError("Projectors are single-copy observables")
            case Representation.DENSE:
                dim = 2 ** (self.copies * len(self.support))
                if self.matrix is None or self.matrix.shape != (dim, dim):
                    raise DimensionError(f"Dense observable must be {dim}x{dim}")
            case _:
                pass

    @classmethod
    def from_pauli(cls, pauli: PauliString, copies: int = 1) -> MultiCopyObservable:
        return cls(copies, pauli.support, Representation.PAULI, pauli=pauli)

    @classmethod
    def shift(cls, n: int, support: Sequence[int]) -> MultiCopyObservable:
        return cls(n, tuple(sorted(support)), Representation.SHIFT)

    @classmethod
    def projector(cls, psi: np.ndarray, support: Sequence[int]) -> MultiCopyObservable:
        vec = np.asarray(psi, dtype=np.complex128).reshape(-1)
        if vec.shape != (2 ** len(support),):
            raise DimensionError(f"Statevector of length {vec.shape[0]} on support {support}")
        norm = np.linalg.norm(vec)
        if abs(norm - 1.0) > get_settings().norm_tol:
            raise ValidationError(f"Projector state norm {norm:.12g} is not 1")
        return cls(1, tuple(sorted(support)), Representation.PROJECTOR, statevector=vec)

    @classmethod
    def dense(
        cls, matrix: np.ndarray, copies: int, support: Sequence[int]
    ) -> MultiCopyObservable:
        mat = np.asarray(matrix, dtype=np.complex128)
        return cls(copies, tuple(sorted(support)), Representation.DENSE, matrix=mat)

    def localize(self, matrix: np.ndarray, batch_support: Sequence[int]) -> ComplexArray:
        """Reduce a matrix on ``batch_support`` to this observable's support."""
        batch_support = tuple(batch_support)
        positions = [batch_support.index(q) for q in self.support]
        if positions == list(range(len(batch_support))):
            return np.asarray(matrix, dtype=np.complex128)
        return _partial_trace_matrix(matrix, len(batch_support), positions)

    def _pauli_matrix(self) -> ComplexArray:
        assert self.pauli is not None
        return kron_all(PAULI_MATRICES[self.pauli.letters[q]] for q in self.support)

    def contract(self, mats: Sequence[np.ndarray]) -> complex:
        """``Tr[O (A_1 x ... x A_n)]`` for matrices already on the support."""
        if len(mats) != self.copies:
            raise ArgumentError(f"Expected {self.copies} matrices, got {len(mats)}")
        match self.representation:
            case Representation.PAULI:
                op = self._pauli_matrix()
                result = 1.0 + 0.0j
                for a in mats:
                    result *= np.einsum("ij,ji->", op, a)
                return complex(result)
            case Representation.SHIFT:
                return cyclic_trace(mats)
            case Representation.PROJECTOR:
                assert self.statevector is not None
                psi = self.statevector
                return complex(np.vdot(psi, mats[0] @ psi))
            case _:
                assert self.matrix is not None
                product = kron_all(mats)
                return complex(np.einsum("ij,ji->", self.matrix, product))

    def gradient(self, mats: Sequence[np.ndarray], slot: int) -> ComplexArray:
        """``G`` with ``contract(mats, X in slot) = Tr(X G)``; ``mats[slot]`` is not read."""
        n = self.copies
        if len(mats) != n or not 0 <= slot < n:
            raise ArgumentError(f"Slot {slot} of {len(mats)} matrices for {n} copies")
        match self.representation:
            case Representation.PAULI:
                op = self._pauli_matrix()
                scale = 1.0 + 0.0j
                for i, a in enumerate(mats):
                    if i != slot:
                        scale *= np.einsum("ij,ji->", op, a)
                return scale * op
            case Representation.SHIFT:
                # Tr(A_1 .. X .. A_n) = Tr(X A_{slot+1} .. A_n A_1 .. A_{slot-1})
                rest = [mats[(slot + i) % n] for i in range(1, n)]
                return np.asarray(rest[0]) if len(rest) == 1 else np.linalg.multi_dot(rest)
            case Representation.PROJECTOR:
                assert self.statevector is not None
                return np.outer(self.statevector, self.statevector.conj())
            case _:
                assert self.matrix is not None
                d = 2 ** len(self.support)
                operands: list = [self.matrix.reshape((d,) * (2 * n)), list(range(2 * n))]
                for i, a in enumerate(mats):
                    if i != slot:
                        operands += [a, [n + i, i]]
                return np.einsum(*operands, [slot, n + slot])

    def to_dense(self) -> ComplexArray:
        match self.representation:
            case Representation.PAULI:
                return kron_all([self._pauli_matrix()] * self.copies)
            case Representation.SHIFT:
                return shift_operator(self.copies, len(self.support))
            case Representation.PROJECTOR:
                assert self.statevector is not None
                return np.outer(self.statevector, self.statevector.conj())
            case _:
                assert self.matrix is not None
                return self.matrix


# ---------------------------------------------------------------------------
# Single-copy estimators on datasets
# ---------------------------------------------------------------------------


def _budget(dataset: Dataset) -> tuple[int, int | None]:
    return len(dataset), dataset.n_m


def _parity_signs(k: int) -> RealArray:
    """``(-1)^{|s|}`` for every k-bit basis state."""
    signs = np.ones(1)
    for _ in range(k):
        signs = np.concatenate([signs, -signs])
    return signs


def pauli_contributions(
    dataset: Dataset, sigma: PseudoState | None, pauli: PauliString
) -> RealArray:
    """Per-record closed-form (CRM) shadow estimates of ``Tr(rho gamma)``.

    Record ``r`` contributes
    ``3^|A| [U_A = V_gamma] (<Z_A>_rho - <Z_A>_sigma) + Tr(sigma gamma)``
    where ``<Z_A>`` are parities of the outcome distributions on ``A = supp(gamma)``
    and ``V_gamma`` is the setting that rotates ``gamma`` to ``Z_A``.
    """
    if pauli.n_qubits != dataset.n_qubits:
        raise DimensionError(
            f"Pauli string {pauli} does not match a {dataset.n_qubits}-qubit dataset"
        )
    support = pauli.support
    if not support:
        return np.ones(len(dataset))

    target = pauli.restrict(support)
    signs = _parity_signs(len(support))
    weight = 3.0 ** len(support)
    sigma_a = sigma.reduce(support) if sigma is not None else None
    offset = pauli_expectation(sigma, pauli) if sigma is not None else 0.0

    contributions = np.empty(len(dataset))
    for i, record in enumerate(dataset.records):
        local = record.setting.restrict(support)
        if str(local) != target:
            contributions[i] = offset
            continue
        z_rho = float(record_marginal(record, support) @ signs)
        z_sigma = float(born_probabilities(sigma_a, local) @ signs) if sigma_a is not None else 0.0
        contributions[i] = weight * (z_rho - z_sigma) + offset
    return contributions


def estimate_pauli(
    dataset: Dataset, sigma: PseudoState | None, pauli: PauliString
) -> EstimateReport:
    """Mean of ``pauli_contributions``; the identity is exactly 1."""
    contributions = pauli_contributions(dataset, sigma, pauli)
    n_u, n_m = _budget(dataset)
    if not pauli.support:
        return EstimateReport(value=1.0, stderr=0.0, n_u=n_u, n_m=n_m)
    return EstimateReport.from_values(contributions, n_u, n_m)


def estimate_observable(
    dataset: Dataset, sigma: PseudoState | None, observable: MultiCopyObservable
) -> EstimateReport:
    """Generic single-copy estimate: mean of ``Tr(O snapshot_r)`` over records."""
    if observable.copies != 1:
        raise ArgumentError("estimate_observable handles single-copy observables only")
    if observable.support and max(observable.support) >= dataset.n_qubits:
        raise DimensionError(f"Observable support {observable.support} exceeds the dataset")
    n_u, n_m = _budget(dataset)
    contributions = np.empty(len(dataset))
    for i, record in enumerate(dataset.records):
        snapshot = _snapshot(record, sigma, observable.support).matrix
        contributions[i] = np.real(observable.contract([snapshot]))
    return EstimateReport.from_values(contributions, n_u, n_m)


def _snapshot(
    record: MeasurementRecord, sigma: PseudoState | None, support: Sequence[int]
) -> Snapshot:
    if sigma is None:
        return build_rho_snapshot(record, support)
    return build_crm_snapshot(record, sigma, support)


def fidelity_contributions(
    dataset: Dataset, sigma: PseudoState | DensityState | None, psi: np.ndarray
) -> RealArray:
    """Per-record (CRM) shadow estimates of the fidelity ``<psi|rho|psi>`` on all qubits.

    Uses ``<psi|M^-1(U^dagger D U)|psi> = q . M^-1(|U psi|^2)`` so no snapshot is
    materialized: only the rotated target state per record. A pure register-wide
    prior stays a statevector.
    """
    vec = np.asarray(psi, dtype=np.complex128).reshape(-1)
    n = dataset.n_qubits
    if vec.shape != (2**n,):
        raise DimensionError(f"Target state of length {vec.shape[0]} for {n} qubits")
    norm = np.linalg.norm(vec)
    if abs(norm - 1.0) > get_settings().norm_tol:
        raise ValidationError(f"Target state norm {norm:.12g} is not 1")
    everything = tuple(range(n))
    prior: PseudoState | DensityState | None = None
    offset = 0.0
    if isinstance(sigma, DensityState):
        if sigma.n_qubits != n:
            raise DimensionError(f"{sigma.n_qubits}-qubit prior for a {n}-qubit dataset")
        prior = sigma
        if sigma.statevector is not None:
            offset = float(abs(np.vdot(sigma.statevector, vec)) ** 2)
        else:
            offset = float(np.real(np.vdot(vec, sigma.density_matrix() @ vec)))
    elif sigma is not None:
        prior = sigma.reduce(everything)
        offset = float(np.real(np.vdot(vec, prior.matrix @ vec)))

    contributions = np.empty(len(dataset))
    for i, record in enumerate(dataset.records):
        overlaps = np.abs(rotate_statevector(vec, record.setting)) ** 2
        q = record_marginal(record, everything)
        if prior is not None:
            q = q - born_probabilities(prior, record.setting)
        contributions[i] = float(q @ diagonal_inverse_apply(overlaps)) + offset
    return contributions


def estimate_fidelity(
    dataset: Dataset, sigma: PseudoState | DensityState | None, psi: np.ndarray
) -> EstimateReport:
    """Mean of ``fidelity_contributions``."""
    n_u, n_m = _budget(dataset)
    return EstimateReport.from_values(fidelity_contributions(dataset, sigma, psi), n_u, n_m)


# ---------------------------------------------------------------------------
# Multi-copy estimators on batches
# ---------------------------------------------------------------------------


def _batch_budget(batches: Sequence[BatchShadow]) -> tuple[int, int | None]:
    return sum(b.members for b in batches), batches[0].n_m


def _moment_replicates(
    batches: Sequence[BatchShadow], n: int
) -> tuple[float, RealArray | None]:
    if n == 1 and batches[0].kind != "prior":
        return 1.0, np.ones(_batch_budget(batches)[0])
    observable = (
        MultiCopyObservable.shift(n, batches[0].support)
        if n > 1
        else MultiCopyObservable.dense(np.eye(2 ** len(batches[0].support)), 1, batches[0].support)
    )
    return ustatistic_leave_one_out(batches, observable)


def batch_dataset(
    dataset: Dataset, sigma: PseudoState | None, support: Sequence[int], m: int
) -> list[BatchShadow]:
    """Standard (``sigma=None``) or CRM snapshots on ``support``, grouped into ``m`` batches."""
    snapshots = [_snapshot(rec, sigma, support) for rec in dataset.records]
    return make_batches(snapshots, m)


def estimate_multicopy(
    batches: Sequence[BatchShadow], observable: MultiCopyObservable
) -> EstimateReport:
    """``estimate_mco`` with the delete-one-unitary jackknife error attached."""
    value, replicates = ustatistic_leave_one_out(batches, observable)
    n_u, n_m = _batch_budget(batches)
    return EstimateReport.from_leave_out(value, replicates, n_u, n_m)


def estimate_trace_moment(batches: Sequence[BatchShadow], n: int) -> EstimateReport:
    """U-statistic estimate of ``p_n = Tr(rho_A^n)`` using the cyclic shift."""
    if n < 1:
        raise ArgumentError(f"Moment order must be >= 1, got {n}")
    if len(batches) < n:
        raise ArgumentError(f"{len(batches)} batches cannot estimate p_{n}")
    value, replicates = _moment_replicates(batches, n)
    n_u, n_m = _batch_budget(batches)
    return EstimateReport.from_leave_out(value, replicates, n_u, n_m)


# ---------------------------------------------------------------------------
# Entropy polynomial
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntropyPolynomial:
    """``f(x) = sum_{n=1}^{n_max} a_n x^n``; ``exact`` holds rationals when available."""

    n_max: int
    coefficients: tuple[float, ...]
    exact: tuple[sp.Rational, ...] | None = None

    def evaluate(self, x: float | np.ndarray) -> float | np.ndarray:
        return np.polynomial.polynomial.polyval(x, (0.0, *self.coefficients))

    def stationarity_residual(self) -> float:
        """Max deviation of ``sum_n' a_n' / (1 + n + n') = 1 / (2 + n)^2`` over ``n``."""
        orders = np.arange(1, self.n_max + 1)
        gram = 1.0 / (1.0 + orders[:, None] + orders[None, :])
        rhs = 1.0 / (2.0 + orders) ** 2
        return float(np.max(np.abs(gram @ np.array(self.coefficients) - rhs)))


def cauchy_inverse(
    x: Sequence[float], y: Sequence[float], exact: bool = False
) -> np.ndarray | sp.Matrix:
    """Closed-form inverse of ``A_ij = 1 / (x_i + y_j)``.

    ``b_ij = prod_k (x_j + y_k)(x_k + y_i)``
    ``/ [(x_j + y_i) prod_{k!=j}(x_j - x_k) prod_{k!=i}(y_i - y_k)]``.
    With ``exact=True`` the nodes are taken as rationals and a sympy matrix is returned.
    """
    if len(x) != len(y) or not len(x):
        raise ArgumentError(f"Node lists must be nonempty and equally long ({len(x)}, {len(y)})")
    if len(set(x)) != len(x) or len(set(y)) != len(y):
        raise SingularityError("Cauchy nodes must be pairwise distinct")
    if any(xi + yj == 0 for xi in x for yj in y):
        raise SingularityError("x_i + y_j vanishes for some node pair")
    size = len(x)

    if exact:
        xs = [sp.Rational(v) for v in x]
        ys = [sp.Rational(v) for v in y]

        def entry(i: int, j: int) -> sp.Rational:
            num = sp.prod([(xs[j] + ys[k]) * (xs[k] + ys[i]) for k in range(size)])
            dx = sp.prod([xs[j] - xs[k] for k in range(size) if k != j])
            dy = sp.prod([ys[i] - ys[k] for k in range(size) if k != i])
            return num / ((xs[j] + ys[i]) * dx * dy)

        return sp.Matrix([[entry(i, j) for j in range(size)] for i in range(size)])

    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    sums = xv[:, None] + yv[None, :]
    row_prod = np.prod(sums, axis=1)
    col_prod = np.prod(sums, axis=0)
    dx = np.array([np.prod(np.delete(xv[j] - xv, j)) for j in range(size)])
    dy = np.array([np.prod(np.delete(yv[i] - yv, i)) for i in range(size)])
    return np.outer(col_prod, row_prod) / (sums.T * np.outer(dy, dx))


def _nodes(n_max: int) -> tuple[list[int], list[int]]:
    orders = list(range(1, n_max + 1))
    return [n + 1 for n in orders], orders


def entropy_poly_coeffs(n_max: int, exact: bool | None = None) -> EntropyPolynomial:
    """Least-squares coefficients of ``-x log x`` by explicit Cauchy inversion."""
    if not 1 <= n_max <= MAX_POLY_ORDER:
        raise ArgumentError(f"n_max must be in 1..{MAX_POLY_ORDER}, got {n_max}")
    if exact is None:
        exact = n_max <= get_settings().exact_rational_max_order
    x, y = _nodes(n_max)
    if exact:
        inverse = cauchy_inverse(x, y, exact=True)
        rhs = sp.Matrix([sp.Rational(1, (n + 2) ** 2) for n in y])
        rational = tuple(inverse * rhs)
        poly = EntropyPolynomial(n_max, tuple(float(a) for a in rational), rational)
    else:
        inverse = cauchy_inverse(x, y)
        rhs = 1.0 / (np.array(y, dtype=np.float64) + 2.0) ** 2
        poly = EntropyPolynomial(n_max, tuple(float(a) for a in inverse @ rhs))
    residual = poly.stationarity_residual()
    if residual > 1e-10:
        logger.warning("Entropy polynomial n_max=%d has residual %.3g", n_max, residual)
    return poly


def least_square_error(poly: EntropyPolynomial) -> float:
    """``int_0^1 (f(x) - f_K(x))^2 dx`` in closed form."""
    orders = np.arange(1, poly.n_max + 1)
    a = np.array(poly.coefficients)
    gram = 1.0 / (1.0 + orders[:, None] + orders[None, :])
    linear = 2.0 * np.sum(a / (2.0 + orders) ** 2)
    return float(2.0 / 27.0 - linear + a @ gram @ a)


def _entropy_fn(x: np.ndarray) -> np.ndarray:
    safe = np.where(x > 0.0, x, 1.0)
    return np.where(x > 0.0, -x * np.log(safe), 0.0)


@lru_cache(maxsize=MAX_POLY_ORDER)
def _alpha(n_max: int, grid_points: int) -> float:
    poly = entropy_poly_coeffs(n_max)
    grid = np.linspace(0.0, 1.0, grid_points)
    gap = np.abs(_entropy_fn(grid) - poly.evaluate(grid))
    best = int(np.argmax(gap))
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, grid_points - 1)]
    refined = minimize_scalar(
        lambda t: -abs(float(_entropy_fn(np.array(t))) - float(poly.evaluate(t))),
        bounds=(lo, hi),
        method="bounded",
    )
    return max(float(gap[best]), -float(refined.fun))


def entropy_error_bound(n_max: int, rank: int = 1) -> float:
    """``alpha_K * rank``: a bound on ``|S - S_K|`` for states of the given rank."""
    if rank < 1:
        raise ArgumentError(f"rank must be >= 1, got {rank}")
    return _alpha(n_max, get_settings().alpha_grid_points) * rank


def exact_entropy_poly(rho_a: np.ndarray, n_max: int) -> float:
    """``S_K(rho_A) = Tr f_K(rho_A)`` from the spectrum."""
    poly = entropy_poly_coeffs(n_max)
    return float(np.sum(poly.evaluate(_spectrum(rho_a))))


def estimate_entropy_poly(
    batches: Sequence[BatchShadow], n_max: int, poly: EntropyPolynomial | None = None
) -> EstimateReport:
    """``S_K = a_1 + sum_{n>=2} a_n p_n`` with every ``p_n`` from the same batches.

    The jackknife replicates of ``S_K`` are the same linear combination of the
    moment replicates.
    """
    poly = poly or entropy_poly_coeffs(n_max)
    if len(batches) < n_max:
        raise ArgumentError(f"{len(batches)} batches cannot estimate S_{n_max}")
    n_u, n_m = _batch_budget(batches)
    value = poly.coefficients[0]
    replicates: RealArray | None = np.full(n_u, poly.coefficients[0])
    for n in range(2, n_max + 1):
        moment, moment_replicates = _moment_replicates(batches, n)
        a_n = poly.coefficients[n - 1]
        value += a_n * moment
        if replicates is not None and moment_replicates is not None:
            replicates = replicates + a_n * moment_replicates
        else:
            replicates = None
    logger.debug("S_%d estimate %.6g from %d batches", n_max, value, len(batches))
    return EstimateReport.from_leave_out(value, replicates, n_u, n_m)
