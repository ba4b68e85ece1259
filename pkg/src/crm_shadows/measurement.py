"""Born probabilities, randomized-measurement simulation and dataset persistence.

Dataset files are JSON Lines: a metadata object on line 1, then one record per
line ``{"r": int, "setting": "XYZ...", "shots": ["0101", ...]}``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from collections import Counter
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field
from pydantic import ValidationError as PydanticValidationError

from crm_shadows.errors import ArgumentError, DimensionError, ValidationError
from crm_shadows.qcore import (
    Bitstring,
    DensityState,
    PseudoState,
    RealArray,
    rotate_state,
    rotate_statevector,
)
from crm_shadows.settings import get_settings

logger = logging.getLogger(__name__)

BASES = "ZXY"
_BITS = frozenset("01")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementSetting:
    """Per-qubit basis labels; ``Z`` is the identity rotation."""

    bases: str

    def __post_init__(self) -> None:
        if not self.bases or any(ch not in BASES for ch in self.bases):
            raise ArgumentError(f"Invalid measurement setting: {self.bases!r}")

    def __str__(self) -> str:
        return self.bases

    def __len__(self) -> int:
        return len(self.bases)

    def restrict(self, qubits: Sequence[int]) -> MeasurementSetting:
        return MeasurementSetting("".join(self.bases[q] for q in qubits))

    @classmethod
    def random(cls, n_qubits: int, rng: np.random.Generator) -> MeasurementSetting:
        picks = rng.integers(0, 3, size=n_qubits)
        return cls("".join(BASES[i] for i in picks))


@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    """Outcomes for one random unitary.

    Either ``shots`` (N_M sampled bitstrings) or ``probabilities`` (exact mode,
    the N_M -> infinity limit) is present.
    """

    index: int
    setting: MeasurementSetting
    shots: tuple[Bitstring, ...] = ()
    probabilities: RealArray | None = None

    def __post_init__(self) -> None:
        n = len(self.setting)
        if self.probabilities is None:
            if not self.shots:
                raise ValidationError(f"Record {self.index} has no shots")
            if any(len(s) != n for s in self.shots):
                raise DimensionError(f"Record {self.index} has shots of the wrong length")
            if set("".join(self.shots)) - _BITS:
                raise ValidationError(f"Record {self.index} has shots that are not 0/1 strings")
        elif self.probabilities.shape != (2**n,):
            raise DimensionError(f"Record {self.index} probability vector has the wrong length")

    @property
    def n_qubits(self) -> int:
        return len(self.setting)

    @property
    def is_exact(self) -> bool:
        return self.probabilities is not None

    @property
    def n_m(self) -> int | None:
        return None if self.is_exact else len(self.shots)

    @cached_property
    def _shot_bits(self) -> np.ndarray:
        raw = np.frombuffer("".join(self.shots).encode("ascii"), dtype=np.uint8)
        return (raw - ord("0")).reshape(len(self.shots), self.n_qubits)


class DatasetMetadata(BaseModel):
    n: int = Field(ge=1)
    nu: int = Field(ge=1)
    nm: int = Field(ge=0, description="shots per setting; 0 marks an exact-mode dataset")
    seed: int = Field(ge=0)
    state: str = ""
    settings_hash: str = ""


@dataclass(frozen=True, eq=False)
class Dataset:
    records: tuple[MeasurementRecord, ...]
    metadata: DatasetMetadata

    def __post_init__(self) -> None:
        indices = [rec.index for rec in self.records]
        if len(set(indices)) != len(indices):
            raise ValidationError("Record indices must be distinct")
        if any(rec.n_qubits != self.metadata.n for rec in self.records):
            raise DimensionError("All records must share the qubit count")
        if len({rec.n_m for rec in self.records}) > 1:
            raise ValidationError("All records must share N_M")
        expected = self.metadata.nm or None
        if self.records and self.records[0].n_m != expected:
            raise ValidationError(
                f"Records carry N_M = {self.records[0].n_m} but the metadata announces {expected}"
            )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[MeasurementRecord]:
        return iter(self.records)

    @property
    def n_qubits(self) -> int:
        return self.metadata.n

    @property
    def n_m(self) -> int | None:
        return self.metadata.nm or None

    @property
    def settings(self) -> list[MeasurementSetting]:
        return [rec.setting for rec in self.records]


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def settings_digest(settings: Sequence[MeasurementSetting | str | None]) -> str:
    """Content hash of a setting sequence (``None`` entries hash as ``-``)."""
    text = "\n".join("-" if s is None else str(s) for s in settings)
    return hashlib.sha256(text.encode("ascii")).hexdigest()


def _record_streams(seed: int, r: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Counter-based (Philox) streams for record ``r``: one for the setting, one for shots."""
    setting_seq, shot_seq = np.random.SeedSequence(seed, spawn_key=(r,)).spawn(2)
    return np.random.Generator(np.random.Philox(setting_seq)), np.random.Generator(
        np.random.Philox(shot_seq)
    )


def random_settings(n_qubits: int, n_u: int, seed: int) -> list[MeasurementSetting]:
    """The setting sequence ``sample_dataset`` draws for ``(seed, r = 1..n_u)``."""
    return [
        MeasurementSetting.random(n_qubits, _record_streams(seed, r)[0]) for r in range(1, n_u + 1)
    ]


def all_settings(n_qubits: int) -> list[MeasurementSetting]:
    return [MeasurementSetting("".join(p)) for p in itertools.product(BASES, repeat=n_qubits)]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def born_probabilities(
    state: DensityState | PseudoState, setting: MeasurementSetting | str
) -> RealArray:
    """``P(s|U) = <s| U state U^dagger |s>`` for every basis state ``s``."""
    if len(str(setting)) != state.n_qubits:
        raise DimensionError(
            f"Setting {setting} does not match a {state.n_qubits}-qubit state"
        )
    if isinstance(state, DensityState) and state.statevector is not None:
        return np.abs(rotate_statevector(state.statevector, setting)) ** 2
    probs = np.real(np.diagonal(rotate_state(state, setting))).copy()
    if isinstance(state, DensityState):
        if probs.min() < -get_settings().psd_tol:
            raise ValidationError(f"Negative Born probability {probs.min():.3g}")
        np.clip(probs, 0.0, None, out=probs)
    return probs


def _sample_bitstrings(
    probs: RealArray, n_m: int, n_qubits: int, rng: np.random.Generator
) -> tuple[Bitstring, ...]:
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    outcomes = np.searchsorted(cdf, rng.random(n_m), side="right")
    np.minimum(outcomes, probs.size - 1, out=outcomes)
    return tuple(format(int(o), f"0{n_qubits}b") for o in outcomes)


def sample_dataset(
    state: DensityState,
    n_u: int,
    n_m: int,
    seed: int,
    *,
    settings: Sequence[MeasurementSetting] | None = None,
    workers: int | None = None,
) -> Dataset:
    """Simulate ``n_u`` randomized measurements with ``n_m`` shots each.

    Record ``r`` depends only on ``(seed, r)``. Passing ``settings`` reuses a
    given setting sequence (``n_u`` must match its length).
    """
    if n_u < 1 or n_m < 1:
        raise ArgumentError(f"N_U and N_M must be >= 1, got {n_u}, {n_m}")
    if settings is not None and len(settings) != n_u:
        raise ArgumentError(f"{len(settings)} settings given for N_U = {n_u}")
    n = state.n_qubits

    def simulate(r: int) -> MeasurementRecord:
        setting_rng, shot_rng = _record_streams(seed, r)
        if settings is not None:
            setting = settings[r - 1]
        else:
            setting = MeasurementSetting.random(n, setting_rng)
        probs = born_probabilities(state, setting)
        return MeasurementRecord(r, setting, _sample_bitstrings(probs, n_m, n, shot_rng))

    workers = workers or get_settings().workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = tuple(pool.map(simulate, range(1, n_u + 1)))
    else:
        records = tuple(simulate(r) for r in range(1, n_u + 1))

    logger.debug("Simulated %d records x %d shots on %d qubits (seed=%d)", n_u, n_m, n, seed)
    metadata = DatasetMetadata(
        n=n,
        nu=n_u,
        nm=n_m,
        seed=seed,
        state=state.descriptor,
        settings_hash=settings_digest([rec.setting for rec in records]),
    )
    return Dataset(records, metadata)


def exact_dataset(
    state: DensityState, settings: Sequence[MeasurementSetting], seed: int = 0
) -> Dataset:
    """Exact-mode dataset: each record carries the Born distribution itself."""
    if not settings:
        raise ArgumentError("At least one setting is required")
    records = tuple(
        MeasurementRecord(r, setting, probabilities=born_probabilities(state, setting))
        for r, setting in enumerate(settings, start=1)
    )
    metadata = DatasetMetadata(
        n=state.n_qubits,
        nu=len(records),
        nm=0,
        seed=seed,
        state=state.descriptor,
        settings_hash=settings_digest(settings),
    )
    return Dataset(records, metadata)


def empirical_distribution(record: MeasurementRecord) -> dict[Bitstring, float]:
    """Sparse map ``bitstring -> count / N_M`` (or the exact nonzero probabilities)."""
    if record.probabilities is not None:
        n = record.n_qubits
        return {
            format(i, f"0{n}b"): float(p) for i, p in enumerate(record.probabilities) if p != 0.0
        }
    counts = Counter(record.shots)
    n_m = len(record.shots)
    return {bits: count / n_m for bits, count in sorted(counts.items())}


def record_marginal(record: MeasurementRecord, support: Sequence[int]) -> RealArray:
    """Outcome distribution restricted to ``support`` as a dense vector of length 2^|A|."""
    n = record.n_qubits
    support = list(support)
    if record.probabilities is not None:
        if support == list(range(n)):
            return record.probabilities
        traced = tuple(q for q in range(n) if q not in support)
        tensor = record.probabilities.reshape((2,) * n).sum(axis=traced)
        # remaining axes are in ascending qubit order; reorder to the support order
        order = np.argsort(np.argsort(support))
        return np.transpose(tensor, order).reshape(-1) if support else tensor.reshape(-1)
    bits = record._shot_bits[:, support]
    weights = 1 << np.arange(len(support) - 1, -1, -1)
    outcomes = bits.astype(np.int64) @ weights
    return np.bincount(outcomes, minlength=2 ** len(support)) / len(record.shots)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    if any(rec.is_exact for rec in dataset.records):
        raise ArgumentError("Exact-mode datasets carry no shots and cannot be saved")
    lines = [dataset.metadata.model_dump_json()]
    for rec in dataset.records:
        lines.append(
            json.dumps(
                {"r": rec.index, "setting": str(rec.setting), "shots": list(rec.shots)},
                separators=(",", ":"),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    dataset_path = Path(path)
    if not dataset_path.is_file():
        raise ValidationError(f"No dataset file at {dataset_path}")
    with dataset_path.open(encoding="utf-8") as f:
        header = f.readline()
        if not header.strip():
            raise ValidationError(f"Dataset file {path} is empty")
        try:
            metadata = DatasetMetadata.model_validate_json(header)
            records = [_record_from_json(json.loads(line)) for line in f if line.strip()]
        except (PydanticValidationError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"Malformed dataset file {path}: {exc}") from exc
    dataset = Dataset(tuple(records), metadata)
    if len(dataset) != metadata.nu:
        raise ValidationError(f"Metadata announces {metadata.nu} records, file has {len(dataset)}")
    if metadata.settings_hash and metadata.settings_hash != settings_digest(dataset.settings):
        raise ValidationError("Stored settings hash does not match the records")
    return dataset


def _record_from_json(raw: dict) -> MeasurementRecord:
    return MeasurementRecord(
        index=int(raw["r"]),
        setting=MeasurementSetting(raw["setting"]),
        shots=tuple(raw["shots"]),
    )
