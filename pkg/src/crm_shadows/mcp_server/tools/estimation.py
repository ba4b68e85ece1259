"""MCP tools running estimators on stored datasets."""

from __future__ import annotations

from typing import Any, Literal

from crm_shadows.errors import ConfigError, CRMError
from crm_shadows.mcp_server import mcp
from crm_shadows.measurement import load_dataset
from crm_shadows.observables import (
    batch_dataset,
    estimate_entropy_poly,
    estimate_fidelity,
    estimate_pauli,
    estimate_trace_moment,
)
from crm_shadows.qcore import PauliString, PseudoState
from crm_shadows.statesrc import load_state, reference_statevector, resolve_prior_state


@mcp.tool()
def estimate_from_dataset(
    path: str,
    kind: Literal["pauli", "moment", "entropy", "fidelity"],
    prior: str = "none",
    pauli: str | None = None,
    support: list[int] | None = None,
    order: int = 2,
    batches: int | None = None,
    state: str | None = None,
) -> dict[str, Any]:
    """Estimate a quantity from a JSONL dataset written by ``crm-shadows simulate``.

    Args:
        path: Dataset file.
        kind: pauli (needs pauli), moment / entropy (need support; order is n or n_max),
            fidelity (target is the dataset's own state or ``state``).
        prior: "none", "exact", "mps:chi=K" or a state descriptor.
        pauli: Pauli string such as "ZZI".
        support: 0-based qubits of the subsystem.
        order: Moment order n, or polynomial order n_max for entropy.
        batches: Number of batches m (defaults to order).
        state: State descriptor overriding the one recorded in the dataset.

    Returns:
        value, stderr, n_u, n_m, or error/message on failure
    """
    if kind == "pauli" and not pauli:
        return {"error": "validation_error", "message": "pauli is required for kind=pauli"}
    if kind in ("moment", "entropy") and not support:
        return {"error": "validation_error", "message": f"support is required for kind={kind}"}
    if order < 1:
        return {"error": "validation_error", "message": "order must be >= 1"}
    try:
        dataset = load_dataset(path)
        descriptor = state or dataset.metadata.state
        with_prior = prior.strip().lower() != "none"
        source = None
        # the state is only needed for a prior or a fidelity target
        if with_prior or kind == "fidelity":
            if not descriptor:
                return {"error": "validation_error", "message": "no state recorded or given"}
            source = load_state(descriptor)
            if source.n_qubits != dataset.n_qubits:
                raise ConfigError("state", f"{descriptor!r} does not match the dataset size")
        prior_state = None
        if with_prior and source is not None:
            prior_state = resolve_prior_state(prior, source)

        if kind == "pauli":
            assert pauli is not None
            string = PauliString(pauli)
            sigma = None
            if prior_state is not None and string.support:
                sigma = PseudoState.from_state(prior_state, string.support)
            report = estimate_pauli(dataset, sigma, string)
        elif kind == "fidelity":
            assert source is not None
            target = reference_statevector(source)
            if target is None:
                return {"error": "validation_error", "message": "no pure target state"}
            report = estimate_fidelity(dataset, prior_state, target)
        else:
            assert support is not None
            qubits = tuple(sorted(set(support)))
            sigma = None if prior_state is None else PseudoState.from_state(prior_state, qubits)
            grouped = batch_dataset(dataset, sigma, qubits, batches or order)
            if kind == "moment":
                report = estimate_trace_moment(grouped, order)
            else:
                report = estimate_entropy_poly(grouped, order)
    except CRMError as exc:
        return exc.to_dict()
    return {"kind": kind, "prior": prior, **report.model_dump()}
