"""Variance formulas, bounds and exhaustive oracles; empirical errors; prior selection."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from crm_shadows.errors import ArgumentError, DimensionError, ResourceError
from crm_shadows.measurement import Dataset, all_settings
from crm_shadows.observables import (
    EstimateReport,
    MultiCopyObservable,
    Representation,
    batch_dataset,
    estimate_fidelity,
    estimate_multicopy,
    estimate_observable,
)
from crm_shadows.qcore import (
    PAULI_MATRICES,
    ComplexArray,
    DensityState,
    PauliString,
    PseudoState,
    _check_hermitian,
    _square_qubits,
    conjugate_by_product,
    hs_norm,
    kron_all,
    pauli_expectation,
    rotation_gates,
)
from crm_shadows.settings import get_settings
from crm_shadows.shadows import inverse_channel_apply

logger = logging.getLogger(__name__)

FIDELITY_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReducedOneCopyOperator:
    """``O^(1)_A``: the multi-copy observable with all but one copy traced against ``rho``."""

    support: tuple[int, ...]
    matrix: ComplexArray = field(repr=False)
    provenance: str = "explicit"

    def __post_init__(self) -> None:
        if self.matrix.shape != (2 ** len(self.support),) * 2:
            raise DimensionError(
                f"Operator shape {self.matrix.shape} does not match support {self.support}"
            )
        _check_hermitian(self.matrix)

    @classmethod
    def for_trace_moment(
        cls, rho_a: np.ndarray, n: int, support: Sequence[int]
    ) -> ReducedOneCopyOperator:
        """``rho_A^(n-1)``, the reduced operator of the cyclic shift."""
        if n < 1:
            raise ArgumentError(f"Moment order must be >= 1, got {n}")
        power = np.linalg.matrix_power(np.asarray(rho_a, dtype=np.complex128), n - 1)
        power = (power + power.conj().T) / 2
        return cls(tuple(support), power, provenance=f"shift:n={n}")

    @classmethod
    def for_pauli(cls, pauli: PauliString) -> ReducedOneCopyOperator:
        matrix = kron_all(PAULI_MATRICES[pauli.letters[q]] for q in pauli.support)
        return cls(pauli.support, matrix, provenance=f"pauli:{pauli}")

    @classmethod
    def explicit(cls, matrix: np.ndarray, support: Sequence[int]) -> ReducedOneCopyOperator:
        return cls(tuple(support), np.asarray(matrix, dtype=np.complex128))

    @property
    def n_qubits(self) -> int:
        return len(self.support)


class VarianceBoundReport(BaseModel):
    """Leading-order MCO variance bound split into setting and shot noise."""

    model_config = ConfigDict(frozen=True)

    bound: float = Field(ge=0.0)
    setting_noise: float = Field(ge=0.0)
    shot_noise: float = Field(ge=0.0)
    n_u: int = Field(ge=1)
    n_m: float | None = None
    n_a: int = Field(ge=0)
    n: int = Field(ge=1)


def _inverse_shots(n_m: float | None) -> float:
    if n_m is None or np.isinf(n_m):
        return 0.0
    if n_m < 1:
        raise ArgumentError(f"N_M must be >= 1, got {n_m}")
    return 1.0 / n_m


def _check_budget(n_u: int) -> None:
    if n_u < 1:
        raise ArgumentError(f"N_U must be >= 1, got {n_u}")


# ---------------------------------------------------------------------------
# Analytical formulas
# ---------------------------------------------------------------------------


def pauli_variance_exact(
    pauli: PauliString,
    rho: DensityState | np.ndarray,
    sigma: PseudoState | None,
    n_u: int,
    n_m: float | None,
) -> float:
    """Exact variance of the closed-form Pauli estimator.

    ``[(3^k - 1) Tr(gamma (rho - sigma))^2 + 3^k (1 - Tr(rho gamma)^2) / N_M] / N_U``
    with ``k = |supp(gamma)|``; ``n_m=None`` is the infinite-shot limit.
    """
    _check_budget(n_u)
    k = pauli.n_support
    t_rho = pauli_expectation(rho, pauli)
    t_sigma = pauli_expectation(sigma, pauli) if sigma is not None else 0.0
    setting = (3.0**k - 1.0) * (t_rho - t_sigma) ** 2
    shot = 3.0**k * (1.0 - t_rho**2) * _inverse_shots(n_m)
    return (setting + shot) / n_u


def pauli_variance_bound(
    pauli: PauliString,
    rho: DensityState | np.ndarray,
    sigma: PseudoState | None,
    n_u: int,
    n_m: float | None,
) -> float:
    """``3^k (Tr[gamma (rho - sigma)]^2 + 1 / N_M) / N_U``."""
    t_rho = pauli_expectation(rho, pauli)
    t_sigma = pauli_expectation(sigma, pauli) if sigma is not None else 0.0
    return pauli_variance_bound_from_difference(pauli.n_support, t_rho - t_sigma, n_u, n_m)


def pauli_variance_bound_from_difference(
    k: int, difference: float, n_u: int, n_m: float | None
) -> float:
    """Scalar form of the Pauli bound for a weight-``k`` string and ``Tr[gamma (rho - sigma)]``."""
    _check_budget(n_u)
    if k < 0:
        raise ArgumentError(f"Pauli weight must be >= 0, got {k}")
    return 3.0**k * (difference**2 + _inverse_shots(n_m)) / n_u


def mco_variance_bound_from_norms(
    operator_norm: float,
    difference_norm: float,
    n_a: int,
    n: int,
    n_u: int,
    n_m: float | None,
) -> VarianceBoundReport:
    """Scalar form of the bound: ``n^2 |O|^2 (3^k |rho-sigma|^2 + 2^k / N_M) / N_U``."""
    _check_budget(n_u)
    if n < 1 or n_a < 0:
        raise ArgumentError(f"Invalid n={n} or N_A={n_a}")
    prefactor = n**2 * operator_norm**2 / n_u
    setting = prefactor * 3.0**n_a * difference_norm**2
    shot = prefactor * 2.0**n_a * _inverse_shots(n_m)
    return VarianceBoundReport(
        bound=setting + shot,
        setting_noise=setting,
        shot_noise=shot,
        n_u=n_u,
        n_m=n_m,
        n_a=n_a,
        n=n,
    )


def mco_variance_bound(
    operator: ReducedOneCopyOperator,
    rho_a: np.ndarray,
    sigma_a: np.ndarray | PseudoState | None,
    n: int,
    n_u: int,
    n_m: float | None,
) -> VarianceBoundReport:
    """Leading-order (``1/N_U``) bound; the ``O(1/N_U^2)`` remainder is not included."""
    rho = np.asarray(rho_a, dtype=np.complex128)
    sigma = _as_matrix(sigma_a, rho.shape[0])
    if rho.shape != operator.matrix.shape:
        raise DimensionError("rho_A and O^(1)_A live on different supports")
    return mco_variance_bound_from_norms(
        hs_norm(operator.matrix), hs_norm(rho - sigma), operator.n_qubits, n, n_u, n_m
    )


def _as_matrix(sigma: np.ndarray | PseudoState | None, dim: int) -> ComplexArray:
    if sigma is None:
        return np.zeros((dim, dim), dtype=np.complex128)
    mat = sigma.matrix if isinstance(sigma, PseudoState) else np.asarray(sigma, np.complex128)
    if mat.shape != (dim, dim):
        raise DimensionError(f"Prior of shape {mat.shape} on a {dim}-dimensional support")
    return mat


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------


def exact_leading_variance(
    operator: ReducedOneCopyOperator,
    rho_a: np.ndarray,
    sigma_a: np.ndarray | PseudoState | None,
    n_m: float | None,
) -> float:
    """``V_1 = Var_U[f(U)] + E_U[g(U)] / N_M`` by enumerating every local setting.

    With ``w_s(U) = <s| U M^-1(O) U^dagger |s>``: ``f(U) = sum_s (P_rho - P_sigma)(s|U) w_s
    + Tr(O sigma)`` is the shot-averaged single-unitary estimate, and ``g(U)`` is the
    variance of ``w_s`` under ``P_rho(.|U)``.
    """
    k = operator.n_qubits
    cap = get_settings().max_enumeration_qubits
    if k > cap:
        raise ResourceError(f"Enumerating 3^{k} settings exceeds the cap of {cap} qubits")
    rho = np.asarray(rho_a, dtype=np.complex128)
    if _square_qubits(rho) != k:
        raise DimensionError("rho_A and O^(1)_A live on different supports")
    sigma = _as_matrix(sigma_a, rho.shape[0])
    weights_op = inverse_channel_apply(operator.matrix)
    offset = float(np.real(np.trace(operator.matrix @ sigma)))

    f_values, g_values = [], []
    for setting in all_settings(k) if k else [""]:
        gates = rotation_gates(setting)
        w = np.real(np.diagonal(conjugate_by_product(weights_op, gates)))
        p_rho = np.real(np.diagonal(conjugate_by_product(rho, gates)))
        p_sigma = np.real(np.diagonal(conjugate_by_product(sigma, gates)))
        f_values.append(float((p_rho - p_sigma) @ w) + offset)
        mean_w = float(p_rho @ w)
        g_values.append(float(p_rho @ w**2) - mean_w**2)
    f_arr = np.array(f_values)
    return float(np.var(f_arr) + np.mean(g_values) * _inverse_shots(n_m))


# ---------------------------------------------------------------------------
# Empirical errors
# ---------------------------------------------------------------------------


def empirical_report(values: Sequence[float] | np.ndarray) -> EstimateReport:
    """Mean and standard error of the mean of per-unitary estimates."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ArgumentError(f"At least two values are required, got {arr.size}")
    return EstimateReport.from_values(arr, n_u=arr.size, n_m=None)


def jackknife_report(values: Sequence[float] | np.ndarray, n_blocks: int = 10) -> EstimateReport:
    """Mean with a delete-one-block jackknife standard error."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ArgumentError(f"At least two values are required, got {arr.size}")
    n_blocks = min(n_blocks, arr.size)
    if n_blocks < 2:
        raise ArgumentError("The jackknife needs at least two blocks")
    blocks = np.array_split(arr, n_blocks)
    total, count = arr.sum(), arr.size
    leave_out = np.array([(total - b.sum()) / (count - b.size) for b in blocks])
    return EstimateReport.from_leave_out(float(arr.mean()), leave_out, n_u=count, n_m=None)


# ---------------------------------------------------------------------------
# Prior selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorSelection:
    chosen: int
    reports: list[EstimateReport]
    fidelities: list[float | None]
    flagged: list[int]


Prior = PseudoState | DensityState | None


def _estimate_with_prior(
    dataset: Dataset,
    sigma: Prior,
    observable: MultiCopyObservable,
    m: int | None,
) -> EstimateReport:
    full = tuple(range(dataset.n_qubits))
    if observable.representation == Representation.PROJECTOR and observable.support == full:
        assert observable.statevector is not None
        return estimate_fidelity(dataset, sigma, observable.statevector)
    if isinstance(sigma, DensityState):
        sigma = PseudoState.from_state(sigma, observable.support)
    if observable.copies > 1:
        if m is None:
            raise ArgumentError("Multi-copy prior selection needs the batch count m")
        batches = batch_dataset(dataset, sigma, observable.support, m)
        return estimate_multicopy(batches, observable)
    return estimate_observable(dataset, sigma, observable)


def _prior_fidelity(dataset: Dataset, sigma: PseudoState | DensityState) -> float:
    """Standard-shadow estimate of ``Tr(sigma rho)`` on the prior's qubits.

    This is the fidelity for pure priors; register-wide priors must be pure.
    """
    if isinstance(sigma, DensityState):
        if sigma.statevector is None:
            raise ArgumentError("Register-wide priors must be pure states")
        return estimate_fidelity(dataset, None, sigma.statevector).value
    overlap = MultiCopyObservable.dense(sigma.matrix, 1, sigma.support)
    return estimate_observable(dataset, None, overlap).value


def prior_selection(
    dataset: Dataset,
    priors: Sequence[Prior],
    observable: MultiCopyObservable,
    *,
    threshold: float = FIDELITY_THRESHOLD,
    m: int | None = None,
) -> PriorSelection:
    """Estimate ``observable`` with every candidate prior on the same dataset.

    Priors whose estimated fidelity is below ``threshold`` are flagged and only
    chosen when every candidate is flagged. Among the rest the smallest standard
    error wins; an undefined error ranks last and ties resolve to the lowest
    index. ``None`` stands for standard shadows and is never flagged.
    """
    if not priors:
        raise ArgumentError("At least one prior candidate is required")
    reports: list[EstimateReport] = []
    fidelities: list[float | None] = []
    flagged: list[int] = []
    for index, sigma in enumerate(priors):
        reports.append(_estimate_with_prior(dataset, sigma, observable, m))
        if sigma is None:
            fidelities.append(None)
            continue
        fidelity = _prior_fidelity(dataset, sigma)
        fidelities.append(fidelity)
        if fidelity < threshold:
            flagged.append(index)

    def rank(i: int) -> tuple[bool, float, int]:
        stderr = reports[i].stderr
        return i in flagged, np.inf if stderr is None else stderr, i

    chosen = min(range(len(priors)), key=rank)
    logger.info(
        "Prior selection: chose %d of %d (stderr %s), flagged %s",
        chosen,
        len(priors),
        reports[chosen].stderr,
        flagged,
    )
    return PriorSelection(chosen, reports, fidelities, flagged)
