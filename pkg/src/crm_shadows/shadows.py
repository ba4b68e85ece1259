"""Standard, CRM and companion shadow snapshots; batch shadows; the U-statistic estimator."""

from __future__ import annotations

import itertools
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING

import numpy as np

from crm_shadows.errors import ArgumentError, DimensionError, ProtocolError, ResourceError
from crm_shadows.measurement import (
    MeasurementRecord,
    MeasurementSetting,
    born_probabilities,
    record_marginal,
    settings_digest,
)
from crm_shadows.qcore import (
    ComplexArray,
    PseudoState,
    RealArray,
    _square_qubits,
    conjugate_by_product,
    rotation_gates,
)
from crm_shadows.settings import get_settings

if TYPE_CHECKING:
    from crm_shadows.observables import MultiCopyObservable

logger = logging.getLogger(__name__)

# Inverse channel restricted to diagonal operators: (p0, p1) -> (2 p0 - p1, 2 p1 - p0)
_DIAGONAL_INVERSE = np.array([[2.0, -1.0], [-1.0, 2.0]])


class SnapshotKind(StrEnum):
    STANDARD = "standard"
    PRIOR = "prior"
    CRM = "crm"
    COMPANION = "companion"


@dataclass(frozen=True, eq=False)
class Snapshot:
    support: tuple[int, ...]
    matrix: ComplexArray = field(repr=False)
    kind: SnapshotKind
    setting: MeasurementSetting | None = None
    n_m: int | None = None


@dataclass(frozen=True, eq=False)
class BatchShadow:
    """Mean of a contiguous group of snapshots (batch ``index`` is 1-based).

    ``snapshots`` keeps the member matrices for the delete-one-unitary jackknife.
    """

    support: tuple[int, ...]
    matrix: ComplexArray = field(repr=False)
    index: int
    members: int
    kind: SnapshotKind
    settings_hash: str = ""
    n_m: int | None = None
    snapshots: tuple[ComplexArray, ...] = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# Channel and snapshot builders
# ---------------------------------------------------------------------------


def inverse_channel_apply(matrix: np.ndarray) -> ComplexArray:
    """Apply ``O -> 3 O - Tr(O) 1`` on every qubit tensor index."""
    mat = np.asarray(matrix, dtype=np.complex128)
    k = _square_qubits(mat)
    tensor = mat.reshape((2,) * (2 * k))
    eye_shape = [1] * (2 * k)
    for q in range(k):
        traced = np.trace(tensor, axis1=q, axis2=k + q)
        shape = eye_shape.copy()
        shape[q] = shape[k + q] = 2
        identity = np.eye(2).reshape(shape)
        tensor = 3.0 * tensor - np.expand_dims(traced, axis=(q, k + q)) * identity
    return tensor.reshape(2**k, 2**k)


def diagonal_inverse_apply(distribution: RealArray) -> RealArray:
    """The inverse channel on diagonal operators, acting on a length-2^k weight vector."""
    weights = np.asarray(distribution, dtype=np.float64)
    k = weights.shape[0].bit_length() - 1
    weights = weights.reshape((2,) * k)
    for q in range(k):
        weights = np.moveaxis(np.tensordot(_DIAGONAL_INVERSE, weights, axes=([1], [q])), 0, q)
    return weights.reshape(-1)


def shadow_from_distribution(
    distribution: RealArray, setting: MeasurementSetting | str
) -> ComplexArray:
    """``sum_s P(s) M^-1(U^dagger |s><s| U)``: one dephased inverse channel, then rotate back."""
    k = len(str(setting))
    if distribution.shape != (2**k,):
        raise DimensionError(
            f"Distribution of length {distribution.shape[0]} does not match setting {setting}"
        )
    diagonal = np.diag(diagonal_inverse_apply(distribution).astype(np.complex128))
    back = [g.conj().T for g in rotation_gates(setting)]
    return conjugate_by_product(diagonal, back)


def _check_support_cap(support: Sequence[int]) -> None:
    cap = get_settings().max_support_qubits
    if len(support) > cap:
        raise ResourceError(f"Support of {len(support)} qubits exceeds the cap of {cap}")


def _restricted_setting(setting: MeasurementSetting, support: Sequence[int]) -> MeasurementSetting:
    if support and max(support) >= len(setting):
        raise ArgumentError(f"Setting {setting} does not cover support {tuple(support)}")
    return setting.restrict(support)


def build_rho_snapshot(record: MeasurementRecord, support: Sequence[int]) -> Snapshot:
    """Standard shadow of the experimental state on ``support``."""
    support = tuple(sorted(support))
    _check_support_cap(support)
    local = _restricted_setting(record.setting, support)
    matrix = shadow_from_distribution(record_marginal(record, support), local)
    return Snapshot(support, matrix, SnapshotKind.STANDARD, record.setting, record.n_m)


def build_sigma_snapshot(sigma: PseudoState, setting: MeasurementSetting) -> Snapshot:
    """``sigma^(r)``: the shadow built from the exact Born probabilities of the prior."""
    _check_support_cap(sigma.support)
    local = _restricted_setting(setting, sigma.support)
    matrix = shadow_from_distribution(born_probabilities(sigma, local), local)
    return Snapshot(sigma.support, matrix, SnapshotKind.PRIOR, setting, None)


def build_crm_snapshot(
    record: MeasurementRecord, sigma: PseudoState, support: Sequence[int]
) -> Snapshot:
    """``rho_hat^(r) - sigma^(r) + sigma_A`` with both shadows from the record's setting."""
    support = tuple(sorted(support))
    _check_support_cap(support)
    sigma_a = sigma.reduce(support)
    local = _restricted_setting(record.setting, support)
    difference = record_marginal(record, support) - born_probabilities(sigma_a, local)
    matrix = shadow_from_distribution(difference, local) + sigma_a.matrix
    return Snapshot(support, matrix, SnapshotKind.CRM, record.setting, record.n_m)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def make_batches(snapshots: Sequence[Snapshot], m: int) -> list[BatchShadow]:
    """Split ``snapshots`` into ``m`` contiguous groups and average each."""
    n_u = len(snapshots)
    if m < 1 or n_u % m != 0:
        raise ArgumentError(f"m = {m} must be >= 1 and divide N_U = {n_u}")
    supports = {s.support for s in snapshots}
    if len(supports) != 1:
        raise ArgumentError("Snapshots live on different supports")
    size = n_u // m
    batches = []
    for t in range(m):
        members = snapshots[t * size : (t + 1) * size]
        stack = np.stack([s.matrix for s in members])
        # equal members average to themselves exactly
        matrix = stack[0].copy() if (stack == stack[0]).all() else np.mean(stack, axis=0)
        batches.append(
            BatchShadow(
                support=members[0].support,
                matrix=matrix,
                index=t + 1,
                members=size,
                kind=members[0].kind,
                settings_hash=settings_digest([s.setting for s in members]),
                n_m=members[0].n_m,
                snapshots=tuple(s.matrix for s in members),
            )
        )
    return batches


def build_companion_batches(
    rho_batches: Sequence[BatchShadow],
    sigma_batches: Sequence[BatchShadow],
    sigma_prime: Sequence[BatchShadow] | PseudoState,
) -> list[BatchShadow]:
    """``rho[t] - sigma[t] + sigma'[t]`` from a companion experiment.

    ``rho_batches`` and ``sigma_batches`` must come from identical setting
    sequences; ``sigma_prime`` holds batches from independent settings, or the
    exact prior (the limit of infinitely many companion unitaries).
    """
    m = len(rho_batches)
    exact_prime = isinstance(sigma_prime, PseudoState)
    if len(sigma_batches) != m or (not exact_prime and len(sigma_prime) != m):
        raise ArgumentError("All three batch sets must have the same number of batches")
    combined = []
    for t in range(m):
        rho_t, sigma_t = rho_batches[t], sigma_batches[t]
        if rho_t.settings_hash != sigma_t.settings_hash:
            raise ProtocolError(
                f"Batch {t + 1}: experiment and companion batches used different settings"
            )
        if isinstance(sigma_prime, PseudoState):
            shift = sigma_prime.reduce(rho_t.support).matrix
        else:
            if sigma_prime[t].support != rho_t.support:
                raise ArgumentError("Companion batches live on a different support")
            shift = sigma_prime[t].matrix
        if sigma_t.support != rho_t.support:
            raise ArgumentError("Companion batches live on a different support")
        # per-unitary members; the companion shift is held fixed within a batch
        paired = len(rho_t.snapshots) == len(sigma_t.snapshots) == rho_t.members
        units = (
            tuple(r - s + shift for r, s in zip(rho_t.snapshots, sigma_t.snapshots, strict=True))
            if paired
            else ()
        )
        combined.append(
            BatchShadow(
                support=rho_t.support,
                matrix=rho_t.matrix - sigma_t.matrix + shift,
                index=rho_t.index,
                members=rho_t.members,
                kind=SnapshotKind.COMPANION,
                settings_hash=rho_t.settings_hash,
                n_m=rho_t.n_m,
                snapshots=units,
            )
        )
    return combined


# ---------------------------------------------------------------------------
# U-statistic
# ---------------------------------------------------------------------------


def _kernel_table(
    batches: Sequence[BatchShadow], observable: MultiCopyObservable
) -> tuple[list[ComplexArray], list[tuple[int, ...]], RealArray]:
    m, n = len(batches), observable.copies
    if m < n:
        raise ArgumentError(f"{m} batches cannot serve a {n}-copy observable")
    support = batches[0].support
    if any(b.support != support for b in batches):
        raise ArgumentError("Batches live on different supports")
    if not set(observable.support) <= set(support):
        raise ArgumentError(
            f"Observable support {observable.support} not inside batch support {support}"
        )
    matrices = [observable.localize(b.matrix, support) for b in batches]
    tuples = list(itertools.permutations(range(m), n))
    kernels = np.array(
        [float(np.real(observable.contract([matrices[t] for t in tup]))) for tup in tuples]
    )
    return matrices, tuples, kernels


def _drop_batch_replicates(
    tuples: Sequence[tuple[int, ...]], kernels: RealArray, m: int, n: int
) -> RealArray | None:
    """One unitary per batch: replicate ``t`` averages the tuples that avoid batch ``t``."""
    if m - 1 < n:
        return None
    sums = np.zeros(m)
    for tup, kernel in zip(tuples, kernels, strict=True):
        for t in tup:
            sums[t] += kernel
    return (kernels.sum() - sums) / (len(tuples) * (m - n) // m)


def ustatistic_leave_one_out(
    batches: Sequence[BatchShadow], observable: MultiCopyObservable
) -> tuple[float, RealArray | None]:
    """U-statistic value and its delete-one-unitary jackknife replicates.

    Replicate ``r`` is the U-statistic recomputed with unitary ``r`` removed from
    its batch. The kernel is multilinear and a batch enters a tuple at most once,
    so removing snapshot ``S`` from batch ``t`` of size ``k`` shifts the value by
    ``Tr(D G_t) / #tuples`` with ``D = (B_t - S) / (k - 1)`` and ``G_t`` the summed
    kernel gradients at ``t``'s slot. With one unitary per batch the batch itself
    is dropped. Replicates are ``None`` when no jackknife is defined: a single
    unitary per batch with ``m == n``, or batches that do not carry their members.
    """
    m, n = len(batches), observable.copies
    matrices, tuples, kernels = _kernel_table(batches, observable)
    identical = np.ptp(kernels) == 0.0
    value = float(kernels[0]) if identical else float(np.mean(kernels))
    if all(b.members == 1 for b in batches):
        if identical and m > n:
            return value, np.full(m, value)
        return value, _drop_batch_replicates(tuples, kernels, m, n)
    if any(b.members < 2 or len(b.snapshots) != b.members for b in batches):
        logger.debug("Batches without their snapshots: no jackknife replicates")
        return value, None

    support = batches[0].support
    gradients = [np.zeros_like(matrices[0]) for _ in range(m)]
    for tup in tuples:
        mats = [matrices[t] for t in tup]
        for slot, t in enumerate(tup):
            gradients[t] += observable.gradient(mats, slot)
    replicates = []
    for batch, gradient in zip(batches, gradients, strict=True):
        for snapshot in batch.snapshots:
            delta = observable.localize(batch.matrix - snapshot, support) / (batch.members - 1)
            shift = float(np.real(np.einsum("ij,ji->", delta, gradient))) / len(tuples)
            replicates.append(value + shift)
    return value, np.array(replicates)


def estimate_mco(batches: Sequence[BatchShadow], observable: MultiCopyObservable) -> float:
    """Unbiased estimate of ``Tr(O rho^{(x)n})`` from ``m >= n`` batch shadows."""
    _, _, kernels = _kernel_table(batches, observable)
    return float(kernels[0]) if np.ptp(kernels) == 0.0 else float(np.mean(kernels))
