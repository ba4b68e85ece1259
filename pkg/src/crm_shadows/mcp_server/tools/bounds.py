"""MCP tools for analytical variance bounds."""

from __future__ import annotations

from typing import Any

from crm_shadows.errors import CRMError
from crm_shadows.mcp_server import mcp
from crm_shadows.variance import (
    mco_variance_bound_from_norms,
    pauli_variance_bound_from_difference,
)


@mcp.tool()
def get_variance_bounds(
    n_a: int,
    n_u: int,
    n_m: float | None = None,
    copies: int = 1,
    operator_norm: float = 1.0,
    difference_norm: float = 1.0,
    pauli_difference: float | None = None,
) -> dict[str, Any]:
    """Leading-order variance bounds for (CRM) shadow estimators.

    Pass ``difference_norm = ||rho_A - sigma_A||_2`` for a CRM prior, or the
    purity-like ``||rho_A||_2`` for standard shadows. ``n_m`` omitted means
    infinitely many shots.
    """
    if n_a < 0:
        return {"error": "validation_error", "message": "n_a must be >= 0"}
    if n_u < 1:
        return {"error": "validation_error", "message": "n_u must be >= 1"}
    if n_m is not None and n_m < 1:
        return {"error": "validation_error", "message": "n_m must be >= 1"}
    if copies < 1:
        return {"error": "validation_error", "message": "copies must be >= 1"}
    if operator_norm < 0 or difference_norm < 0:
        return {"error": "validation_error", "message": "norms must be >= 0"}
    try:
        report = mco_variance_bound_from_norms(
            operator_norm, difference_norm, n_a, copies, n_u, n_m
        )
        result: dict[str, Any] = {"mco_bound": report.model_dump()}
        if pauli_difference is not None:
            result["pauli_bound"] = pauli_variance_bound_from_difference(
                n_a, pauli_difference, n_u, n_m
            )
    except CRMError as exc:
        return exc.to_dict()
    return result
