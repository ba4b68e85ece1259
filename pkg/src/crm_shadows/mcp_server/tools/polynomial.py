"""MCP tools for the entropy polynomial."""

from __future__ import annotations

from typing import Any

from crm_shadows.errors import CRMError
from crm_shadows.mcp_server import mcp
from crm_shadows.observables import (
    MAX_POLY_ORDER,
    entropy_error_bound,
    entropy_poly_coeffs,
    least_square_error,
)


@mcp.tool()
def get_entropy_polynomial(n_max: int, rank: int = 1) -> dict[str, Any]:
    """Least-squares polynomial approximation of -x log x used for entropy estimation.

    Args:
        n_max: Polynomial order K (1..12).
        rank: Rank of the reduced state; scales the error bound.

    Returns:
        coefficients: a_1..a_K as floats
        rational: exact fractions (present for small K)
        alpha: max |f(x) - f_K(x)| on [0, 1]
        error_bound: alpha * rank, a bound on |S - S_K|
        least_square_error: integrated squared error on [0, 1]
    """
    if not 1 <= n_max <= MAX_POLY_ORDER:
        return {"error": "validation_error", "message": f"n_max must be in 1..{MAX_POLY_ORDER}"}
    if rank < 1:
        return {"error": "validation_error", "message": "rank must be >= 1"}
    try:
        poly = entropy_poly_coeffs(n_max)
        alpha = entropy_error_bound(n_max)
    except CRMError as exc:
        return exc.to_dict()
    result: dict[str, Any] = {
        "n_max": n_max,
        "coefficients": list(poly.coefficients),
        "alpha": alpha,
        "error_bound": alpha * rank,
        "least_square_error": least_square_error(poly),
    }
    if poly.exact is not None:
        result["rational"] = [str(a) for a in poly.exact]
    return result
