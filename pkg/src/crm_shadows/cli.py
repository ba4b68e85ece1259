"""Command-line entry point.

Subcommands:
  - coeffs: entropy-polynomial coefficients and the approximation error alpha
  - simulate: sample a randomized-measurement dataset into a JSONL file
  - estimate {pauli,moment,entropy,fidelity}: estimators on a stored dataset
  - exp {entropy,fidelity,companion}: desk-scale experiment tables (CSV)
  - bounds: analytical variance bounds for given parameters

Failures print one JSON error line on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NoReturn

from crm_shadows.errors import ArgumentError, ConfigError, CRMError
from crm_shadows.experiments import load_config, run_experiment
from crm_shadows.measurement import Dataset, load_dataset, sample_dataset, save_dataset
from crm_shadows.observables import (
    MultiCopyObservable,
    batch_dataset,
    entropy_error_bound,
    entropy_poly_coeffs,
    estimate_entropy_poly,
    estimate_fidelity,
    estimate_pauli,
    estimate_trace_moment,
    fidelity_contributions,
    least_square_error,
    pauli_contributions,
)
from crm_shadows.qcore import DensityState, PauliString, PseudoState
from crm_shadows.settings import get_settings
from crm_shadows.statesrc import load_state, reference_statevector, resolve_prior_state
from crm_shadows.variance import (
    PriorSelection,
    jackknife_report,
    mco_variance_bound_from_norms,
    pauli_variance_bound_from_difference,
    prior_selection,
)

logger = logging.getLogger(__name__)


def _parse_support(text: str) -> tuple[int, ...]:
    try:
        qubits = tuple(sorted({int(q) for q in text.split(",") if q.strip()}))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid qubit list {text!r}") from exc
    if any(q < 0 for q in qubits):
        raise argparse.ArgumentTypeError(f"negative qubit index in {text!r}")
    return qubits


def _parse_labels(text: str) -> list[str]:
    labels = [item.strip() for item in text.split(",") if item.strip()]
    if not labels:
        raise argparse.ArgumentTypeError("no prior candidates given")
    return labels


def _shots(text: str) -> float | None:
    if text.lower() in ("inf", "none"):
        return None
    value = float(text)
    if value < 1:
        raise argparse.ArgumentTypeError("N_M must be >= 1 or 'inf'")
    return value


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2))


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_coeffs(args: argparse.Namespace) -> None:
    poly = entropy_poly_coeffs(args.nmax, exact=False if args.float else None)
    payload: dict[str, Any] = {
        "n_max": poly.n_max,
        "coefficients": list(poly.coefficients),
        "alpha": entropy_error_bound(poly.n_max),
        "least_square_error": least_square_error(poly),
    }
    if poly.exact is not None:
        payload["rational"] = [str(a) for a in poly.exact]
    _emit(payload)


def _cmd_simulate(args: argparse.Namespace) -> None:
    state = load_state(args.state)
    dataset = sample_dataset(state, args.nu, args.nm, args.seed, workers=args.workers)
    save_dataset(dataset, args.out)
    _emit({"path": str(args.out), **dataset.metadata.model_dump()})


def _source_state(args: argparse.Namespace, dataset: Dataset) -> DensityState:
    descriptor = args.state or dataset.metadata.state
    if not descriptor:
        raise ConfigError("state", "the dataset does not name its state; pass --state")
    state = load_state(descriptor)
    if state.n_qubits != dataset.n_qubits:
        raise ConfigError(
            "state", f"{descriptor!r} does not match a {dataset.n_qubits}-qubit dataset"
        )
    return state


def _candidates(args: argparse.Namespace) -> list[str]:
    if args.candidates:
        if args.prior.strip().lower() != "none":
            raise ArgumentError("pass either --prior or --candidates, not both")
        return args.candidates
    return [args.prior]


def _prior_states(
    args: argparse.Namespace, dataset: Dataset, labels: Sequence[str]
) -> list[DensityState | None]:
    """Register-wide prior states; the source state is only loaded when a prior needs it."""
    if all(label.strip().lower() == "none" for label in labels):
        return [None] * len(labels)
    state = _source_state(args, dataset)
    return [resolve_prior_state(label, state) for label in labels]


def _on_support(
    priors: Sequence[DensityState | None], support: Sequence[int]
) -> list[PseudoState | None]:
    return [
        None if prior is None or not support else PseudoState.from_state(prior, support)
        for prior in priors
    ]


def _check_support(support: Sequence[int], dataset: Dataset) -> None:
    if not support:
        raise ArgumentError("--support must name at least one qubit")
    if max(support) >= dataset.n_qubits:
        raise ArgumentError(f"support {tuple(support)} exceeds a {dataset.n_qubits}-qubit dataset")


def _selection_payload(labels: Sequence[str], selection: PriorSelection) -> dict[str, Any]:
    return {
        "candidates": list(labels),
        "chosen": labels[selection.chosen],
        "stderr": [r.stderr for r in selection.reports],
        "fidelities": selection.fidelities,
        "flagged": [labels[i] for i in selection.flagged],
    }


def _cmd_estimate(args: argparse.Namespace) -> None:
    dataset = load_dataset(args.dataset)
    kind = args.kind
    labels = _candidates(args)
    states = _prior_states(args, dataset, labels)
    payload: dict[str, Any] = {"kind": kind}
    contributions = None

    if kind == "pauli":
        pauli = PauliString(args.pauli)
        priors: Sequence[PseudoState | DensityState | None] = _on_support(states, pauli.support)
        observable = MultiCopyObservable.from_pauli(pauli)
        m = None
    elif kind == "fidelity":
        descriptor = args.target or dataset.metadata.state
        if not descriptor:
            raise ConfigError("target", "the dataset does not name its state; pass --target")
        target = reference_statevector(load_state(descriptor, field="target"))
        if target is None:
            raise ConfigError("target", f"{descriptor!r} has no pure reference state")
        priors = states
        observable = MultiCopyObservable.projector(target, range(dataset.n_qubits))
        m = None
    else:
        _check_support(args.support, dataset)
        priors = _on_support(states, args.support)
        order = args.n if kind == "moment" else args.nmax
        m = args.m or order
        # entropy and first-moment candidates are ranked on the purity
        ranked = args.n if kind == "moment" and args.n > 1 else 2
        observable = MultiCopyObservable.shift(ranked, args.support)

    chosen = 0
    if args.candidates:
        selection = prior_selection(dataset, priors, observable, m=m)
        chosen = selection.chosen
        payload["selection"] = _selection_payload(labels, selection)
    sigma = priors[chosen]

    if kind == "pauli":
        contributions = pauli_contributions(dataset, sigma, pauli)
        report = estimate_pauli(dataset, sigma, pauli)
    elif kind == "fidelity":
        contributions = fidelity_contributions(dataset, sigma, target)
        report = estimate_fidelity(dataset, sigma, target)
    else:
        batches = batch_dataset(dataset, sigma, args.support, m)
        if kind == "moment":
            report = estimate_trace_moment(batches, args.n)
        else:
            report = estimate_entropy_poly(batches, args.nmax)
    payload.update({"prior": labels[chosen], **report.model_dump()})
    if contributions is not None and len(contributions) > 1:
        payload["jackknife"] = jackknife_report(contributions).model_dump()
    _emit(payload)


def _cmd_exp(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    if config.experiment != args.experiment:
        raise ConfigError(
            "experiment", f"config describes {config.experiment!r}, not {args.experiment!r}"
        )
    if args.output is not None:
        config = config.model_copy(update={"output": args.output})
    table = run_experiment(config)
    if config.output is None:
        table.to_csv(sys.stdout, index=False, float_format="%.12g")
    else:
        _emit({"path": str(config.output), "rows": len(table)})


def _cmd_bounds(args: argparse.Namespace) -> None:
    payload: dict[str, Any] = {}
    if args.pauli_diff is not None:
        payload["pauli_bound"] = pauli_variance_bound_from_difference(
            args.na, args.pauli_diff, args.nu, args.nm
        )
    report = mco_variance_bound_from_norms(
        args.op_norm, args.diff_norm, args.na, args.n, args.nu, args.nm
    )
    payload["mco_bound"] = report.model_dump()
    _emit(payload)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class JSONArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as one JSON line on stderr, like every other failure."""

    def error(self, message: str) -> NoReturn:
        payload = {"error": "usage_error", "message": f"{self.prog}: {message}"}
        print(json.dumps(payload), file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = JSONArgumentParser(
        prog="crm-shadows", description="Common-randomized-measurement classical shadows"
    )
    parser.add_argument("--log-level", default=None, help="Logging level (default: settings)")
    sub = parser.add_subparsers(dest="command", required=True)

    coeffs = sub.add_parser("coeffs", help="Entropy-polynomial coefficients and alpha")
    coeffs.add_argument("--nmax", type=int, required=True)
    coeffs.add_argument("--float", action="store_true", help="Skip rational arithmetic")
    coeffs.set_defaults(handler=_cmd_coeffs)

    simulate = sub.add_parser("simulate", help="Sample a dataset into a JSONL file")
    simulate.add_argument("--state", required=True, help="State descriptor, e.g. ising:N=8")
    simulate.add_argument("--nu", type=int, required=True, help="Number of settings N_U")
    simulate.add_argument("--nm", type=int, required=True, help="Shots per setting N_M")
    simulate.add_argument("--seed", type=int, required=True)
    simulate.add_argument("--out", type=Path, required=True)
    simulate.add_argument("--workers", type=int, default=None)
    simulate.set_defaults(handler=_cmd_simulate)

    estimate = sub.add_parser("estimate", help="Run an estimator on a stored dataset")
    estimate.add_argument("kind", choices=["pauli", "moment", "entropy", "fidelity"])
    estimate.add_argument("--dataset", type=Path, required=True)
    estimate.add_argument("--prior", default="none", help="none, exact, mps:chi=K or a state")
    estimate.add_argument("--state", default=None, help="State the prior is derived from")
    estimate.add_argument("--pauli", default=None, help="Pauli string (pauli)")
    estimate.add_argument("--support", type=_parse_support, default=(), help="e.g. 0,1,2")
    estimate.add_argument("--n", type=int, default=2, help="Moment order (moment)")
    estimate.add_argument("--nmax", type=int, default=3, help="Polynomial order (entropy)")
    estimate.add_argument("--m", type=int, default=None, help="Number of batches")
    estimate.add_argument("--target", default=None, help="Target state descriptor (fidelity)")
    estimate.add_argument(
        "--candidates",
        type=_parse_labels,
        default=None,
        help="Comma-separated priors to choose from, e.g. none,mps:chi=2",
    )
    estimate.set_defaults(handler=_cmd_estimate)

    exp = sub.add_parser("exp", help="Run an experiment from a config file")
    exp.add_argument("experiment", choices=["entropy", "fidelity", "companion"])
    exp.add_argument("--config", type=Path, required=True)
    exp.add_argument("--output", type=Path, default=None, help="Override the config OUTPUT")
    exp.set_defaults(handler=_cmd_exp)

    bounds = sub.add_parser("bounds", help="Analytical variance bounds")
    bounds.add_argument("--na", type=int, required=True, help="Subsystem size N_A")
    bounds.add_argument("--nu", type=int, required=True)
    bounds.add_argument("--nm", type=_shots, default=None, help="Shots per setting or 'inf'")
    bounds.add_argument("--n", type=int, default=1, help="Number of copies")
    bounds.add_argument("--op-norm", type=float, default=1.0, help="||O^(1)_A||_2")
    bounds.add_argument("--diff-norm", type=float, default=1.0, help="||rho_A - sigma_A||_2")
    bounds.add_argument(
        "--pauli-diff", type=float, default=None, help="Tr[gamma (rho - sigma)] for a Pauli bound"
    )
    bounds.set_defaults(handler=_cmd_bounds)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or get_settings().log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "estimate" and args.kind == "pauli" and not args.pauli:
        parser.error("estimate pauli requires --pauli")
    try:
        args.handler(args)
    except CRMError as exc:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io_error", "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
