"""Desk-scale experiment runner: entropy, fidelity and companion-experiment error tables.

Configuration files are ``KEY=value`` text (``#`` starts a comment)::

    EXPERIMENT=entropy
    STATE=ising:N=16
    PRIORS=none,mps:chi=3
    N_A=8
    N_MAX=3
    NU=27,81,243
    NM=1000
    REPETITIONS=20
    SEED=1234
    SELECT=false
    OUTPUT=fig1b.csv
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as ModelError

from crm_shadows.errors import ConfigError
from crm_shadows.measurement import Dataset, exact_dataset, random_settings, sample_dataset
from crm_shadows.observables import (
    MultiCopyObservable,
    batch_dataset,
    estimate_entropy_poly,
    estimate_fidelity,
    exact_entropy_poly,
)
from crm_shadows.qcore import DensityState, PseudoState, exact_entropy, partial_trace
from crm_shadows.settings import get_settings
from crm_shadows.shadows import build_companion_batches
from crm_shadows.statesrc import (
    load_state,
    reference_statevector,
    resolve_prior,
    resolve_prior_state,
)
from crm_shadows.variance import jackknife_report, prior_selection

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "experiment",
    "N",
    "N_A",
    "N_U",
    "N_M",
    "prior",
    "estimator",
    "value",
    "stderr",
    "exact_reference",
    "rel_error",
]

ExperimentKind = Literal["entropy", "fidelity", "companion"]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    experiment: ExperimentKind
    state: str
    priors: list[str] = Field(default_factory=lambda: ["none"])
    n_a: int | None = Field(default=None, ge=1)
    n_max: int = Field(default=3, ge=1, le=12)
    nu: list[int]
    nm: int = Field(ge=1)
    repetitions: int = Field(default=1, ge=1)
    seed: int = Field(ge=0)
    m: int | None = Field(default=None, ge=1)
    nu_prime: list[int] = Field(default_factory=list)
    companion_state: str | None = None
    exact: bool = False
    select: bool = False
    workers: int | None = Field(default=None, ge=1)
    output: Path | None = None

    @field_validator("nu", "nu_prime")
    @classmethod
    def _positive_grid(cls, values: list[int]) -> list[int]:
        if any(v < 1 for v in values):
            raise ValueError("grid values must be >= 1")
        return values

    @model_validator(mode="after")
    def _experiment_requirements(self) -> ExperimentConfig:
        if not self.nu:
            raise ValueError("nu: the N_U grid is empty")
        if self.experiment in ("entropy", "companion"):
            if self.n_a is None:
                raise ValueError("n_a: required for entropy experiments")
            batches = self.batches
            if any(v % batches for v in self.nu):
                raise ValueError(f"nu: every N_U must be a multiple of m = {batches}")
            if batches < self.n_max:
                raise ValueError(f"m: {batches} batches cannot estimate S_{self.n_max}")
        if self.experiment == "companion":
            if not self.nu_prime:
                raise ValueError("nu_prime: required for the companion experiment")
            if self.companion_state is None:
                raise ValueError("companion_state: required for the companion experiment")
            if any(v % self.batches for v in self.nu_prime):
                raise ValueError(f"nu_prime: every N_U' must be a multiple of m = {self.batches}")
            if self.select:
                raise ValueError("select: the companion experiment has no priors to select")
        if self.experiment == "entropy" and self.select and self.batches < 2:
            raise ValueError("m: selecting priors on the purity needs at least two batches")
        return self

    @property
    def batches(self) -> int:
        return self.m or self.n_max


def _split_list(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _field_from_error(exc: ModelError) -> tuple[str, str]:
    error = exc.errors()[0]
    loc = [str(part) for part in error.get("loc", ())]
    message = str(error.get("msg", "invalid value"))
    if loc:
        return loc[0], message
    head, _, rest = message.removeprefix("Value error, ").partition(":")
    return (head, rest.strip()) if rest else ("config", message)


def config_from_mapping(values: dict[str, Any]) -> ExperimentConfig:
    """Validate a flat mapping (lowercase keys) into an ``ExperimentConfig``."""
    try:
        return ExperimentConfig.model_validate(values)
    except ModelError as exc:
        field, message = _field_from_error(exc)
        raise ConfigError(field, message) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError("config", f"no such file: {config_path}")
    raw = {k.lower(): v for k, v in dotenv_values(config_path).items() if v is not None}
    values: dict[str, Any] = dict(raw)
    for key in ("priors",):
        if key in values:
            values[key] = _split_list(values[key])
    for key in ("nu", "nu_prime"):
        if key in values:
            try:
                values[key] = [int(v) for v in _split_list(values[key])]
            except ValueError as exc:
                raise ConfigError(key, f"not a list of integers: {raw[key]!r}") from exc
    config = config_from_mapping(values)
    logger.info("Loaded %s experiment config from %s", config.experiment, config_path)
    return config


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Run:
    """One estimate from one repetition; ``reference`` overrides the table references."""

    n_u: int
    prior: str
    kind: str
    value: float
    stderr: float | None
    reference: float | None = None


def _task_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _dataset(
    state: DensityState,
    config: ExperimentConfig,
    n_u: int,
    seed: int,
    settings: Sequence[Any] | None = None,
) -> Dataset:
    if config.exact:
        chosen = settings if settings is not None else random_settings(state.n_qubits, n_u, seed)
        return exact_dataset(state, chosen, seed)
    return sample_dataset(state, n_u, config.nm, seed, settings=settings, workers=1)


def _map_tasks(config: ExperimentConfig, fn: Any, tasks: list[tuple[int, int]]) -> list[Any]:
    workers = config.workers or get_settings().workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda task: fn(*task), tasks))
    return [fn(*task) for task in tasks]


def _tasks(config: ExperimentConfig) -> list[tuple[int, int]]:
    return [(n_u, rep) for n_u in config.nu for rep in range(config.repetitions)]


def _entropy_runs(
    config: ExperimentConfig,
    state: DensityState,
    priors: dict[str, PseudoState | None],
    support: tuple[int, ...],
) -> list[_Run]:
    purity = MultiCopyObservable.shift(2, support)

    def one(n_u: int, rep: int) -> list[_Run]:
        dataset = _dataset(state, config, n_u, _task_seed(config.seed, n_u, rep))
        runs = []
        for label, sigma in priors.items():
            batches = batch_dataset(dataset, sigma, support, config.batches)
            report = estimate_entropy_poly(batches, config.n_max)
            kind = "standard" if sigma is None else "crm"
            runs.append(_Run(n_u, label, kind, report.value, report.stderr))
        if config.select:
            # rank priors on the purity, then report the entropy of the winner
            selection = prior_selection(
                dataset, list(priors.values()), purity, m=config.batches
            )
            winner = runs[selection.chosen]
            runs.append(_Run(n_u, "selected", "selected", winner.value, winner.stderr))
        return runs

    return [run for group in _map_tasks(config, one, _tasks(config)) for run in group]


def _companion_runs(
    config: ExperimentConfig,
    state: DensityState,
    companion: DensityState,
    support: tuple[int, ...],
) -> list[_Run]:
    m = config.batches

    def one(n_u: int, rep: int) -> list[_Run]:
        rho_data = _dataset(state, config, n_u, _task_seed(config.seed, n_u, rep, 0))
        rho_batches = batch_dataset(rho_data, None, support, m)
        standard = estimate_entropy_poly(rho_batches, config.n_max)
        runs = [_Run(n_u, "none", "standard", standard.value, standard.stderr)]
        same = _dataset(
            companion, config, n_u, _task_seed(config.seed, n_u, rep, 1), rho_data.settings
        )
        same_batches = batch_dataset(same, None, support, m)
        for n_prime in config.nu_prime:
            extra_seed = _task_seed(config.seed, n_u, rep, 2, n_prime)
            extra = _dataset(companion, config, n_prime, extra_seed)
            prime_batches = batch_dataset(extra, None, support, m)
            combined = build_companion_batches(rho_batches, same_batches, prime_batches)
            report = estimate_entropy_poly(combined, config.n_max)
            label = f"companion:nu_prime={n_prime}"
            runs.append(_Run(n_u, label, "companion", report.value, report.stderr))
        return runs

    return [run for group in _map_tasks(config, one, _tasks(config)) for run in group]


def _overlap(state: DensityState, vec: np.ndarray) -> float:
    """``<vec|rho|vec>``."""
    if state.statevector is not None:
        return float(abs(np.vdot(vec, state.statevector)) ** 2)
    return float(np.real(np.vdot(vec, state.density_matrix() @ vec)))


def _fidelity_runs(
    config: ExperimentConfig,
    state: DensityState,
    target: np.ndarray,
    priors: dict[str, DensityState | None],
) -> list[_Run]:
    """Standard shadows against the ideal target, and per prior state ``phi``.

    A pure prior is its own target: ``standard`` and ``crm`` both estimate
    ``<phi|rho|phi>``. ``crm/ideal`` estimates the ideal-target fidelity with the prior.
    """
    ideal = _overlap(state, target)
    own = {
        label: (prior.statevector, _overlap(state, prior.statevector))
        for label, prior in priors.items()
        if prior is not None and prior.statevector is not None
    }
    projector = MultiCopyObservable.projector(target, range(state.n_qubits))

    def one(n_u: int, rep: int) -> list[_Run]:
        dataset = _dataset(state, config, n_u, _task_seed(config.seed, n_u, rep))
        runs = []
        for label, sigma in priors.items():
            report = estimate_fidelity(dataset, sigma, target)
            kind = "standard" if sigma is None else "crm/ideal"
            runs.append(_Run(n_u, label, kind, report.value, report.stderr, ideal))
            if label not in own:
                continue
            phi, reference = own[label]
            for kind, prior in (("standard", None), ("crm", sigma)):
                report = estimate_fidelity(dataset, prior, phi)
                runs.append(_Run(n_u, label, kind, report.value, report.stderr, reference))
        if config.select:
            selection = prior_selection(dataset, list(priors.values()), projector)
            chosen = selection.reports[selection.chosen]
            runs.append(_Run(n_u, "selected", "selected", chosen.value, chosen.stderr, ideal))
        return runs

    return [run for group in _map_tasks(config, one, _tasks(config)) for run in group]


def _aggregate(
    config: ExperimentConfig,
    runs: list[_Run],
    n: int,
    n_a: int,
    references: dict[str, float],
) -> list[dict[str, Any]]:
    """One row per (N_U, prior, estimator, reference) averaged over repetitions."""
    groups: dict[tuple[int, str, str], list[_Run]] = {}
    for run in runs:
        groups.setdefault((run.n_u, run.prior, run.kind), []).append(run)
    rows = []
    for (n_u, prior, kind), members in groups.items():
        values = np.array([r.value for r in members])
        if len(members) > 1:
            stderr = jackknife_report(values).stderr
        else:
            stderr = members[0].stderr
        own = members[0].reference
        for suffix, reference in ({"": own} if own is not None else references).items():
            errors = np.abs(values - reference) / abs(reference) if reference else np.abs(values)
            rows.append(
                {
                    "experiment": config.experiment,
                    "N": n,
                    "N_A": n_a,
                    "N_U": n_u,
                    "N_M": 0 if config.exact else config.nm,
                    "prior": prior,
                    "estimator": f"{kind}/{suffix}" if suffix else kind,
                    "value": float(values.mean()),
                    "stderr": stderr,
                    "exact_reference": reference,
                    "rel_error": float(errors.mean()),
                }
            )
    return rows


def _priors_on(
    config: ExperimentConfig,
    state: DensityState,
    support: Sequence[int],
) -> dict[str, PseudoState | None]:
    priors: dict[str, PseudoState | None] = {"none": None}
    for descriptor in config.priors:
        if descriptor.strip().lower() == "none":
            continue
        priors[descriptor] = resolve_prior(descriptor, state, support)
    return priors


def _prior_states(
    config: ExperimentConfig, state: DensityState, ideal: np.ndarray
) -> dict[str, DensityState | None]:
    priors: dict[str, DensityState | None] = {"none": None}
    for descriptor in config.priors:
        if descriptor.strip().lower() == "none":
            continue
        prior = resolve_prior_state(descriptor, state, ideal)
        assert prior is not None
        if config.select and prior.statevector is None:
            raise ConfigError(
                "priors", f"fidelity prior {descriptor!r} is mixed; selection needs pure priors"
            )
        priors[descriptor] = prior
    return priors


def run_experiment(config: ExperimentConfig) -> pd.DataFrame:
    """Run every grid point and repetition; return (and optionally write) the result table."""
    state = load_state(config.state)
    n = state.n_qubits
    logger.info("Running %s experiment on %s (N=%d)", config.experiment, config.state, n)

    if config.experiment == "fidelity":
        target = reference_statevector(state)
        if target is None:
            raise ConfigError("state", "fidelity experiments need a state with a pure reference")
        runs = _fidelity_runs(config, state, target, _prior_states(config, state, target))
        rows = _aggregate(config, runs, n, n, {})
    else:
        assert config.n_a is not None
        if config.n_a > n:
            raise ConfigError("n_a", f"subsystem of {config.n_a} qubits in an {n}-qubit state")
        support = tuple(range(config.n_a))
        rho_a = partial_trace(state, support)
        references = {
            "stat": exact_entropy_poly(rho_a, config.n_max),
            "total": exact_entropy(rho_a),
        }
        if config.experiment == "entropy":
            runs = _entropy_runs(config, state, _priors_on(config, state, support), support)
        else:
            assert config.companion_state is not None
            companion = load_state(config.companion_state, field="companion_state")
            if companion.n_qubits != n:
                raise ConfigError("companion_state", "companion state has a different size")
            runs = _companion_runs(config, state, companion, support)
        rows = _aggregate(config, runs, n, config.n_a, references)

    table = pd.DataFrame(rows, columns=CSV_COLUMNS)
    table = table.sort_values(["N_U", "prior", "estimator"], kind="stable").reset_index(drop=True)
    if config.output is not None:
        write_table(table, config.output)
    return table


def write_table(table: pd.DataFrame, path: str | Path) -> None:
    table.to_csv(path, index=False, float_format="%.12g")
    logger.info("Wrote %d rows to %s", len(table), path)
