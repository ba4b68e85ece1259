"""CRM classical-shadow MCP server.

Tools:
  - get_entropy_polynomial: coefficients a_n, alpha and error bound for order K
  - get_variance_bounds: leading-order variance bounds from norms
  - estimate_from_dataset: Pauli, trace-moment, entropy or fidelity estimate on a dataset

Transport, host and port default to ``CRM_MCP_TRANSPORT``, ``CRM_MCP_HOST`` and
``CRM_MCP_PORT``.
"""

from __future__ import annotations

import argparse
import logging
from collections.abc import Sequence

import crm_shadows.mcp_server.tools.bounds  # noqa: F401 (registers @mcp.tool())
import crm_shadows.mcp_server.tools.estimation  # noqa: F401
import crm_shadows.mcp_server.tools.polynomial  # noqa: F401
from crm_shadows.mcp_server import mcp
from crm_shadows.settings import get_settings

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(description="CRM Shadows MCP Server")
    parser.add_argument(
        "--transport",
        choices=["stdio", "http"],
        default=settings.mcp_transport,
        help=f"Transport mode (default: {settings.mcp_transport})",
    )
    parser.add_argument(
        "--host", default=settings.mcp_host, help=f"HTTP host (default: {settings.mcp_host})"
    )
    parser.add_argument(
        "--port",
        type=int,
        default=settings.mcp_port,
        help=f"HTTP port (default: {settings.mcp_port})",
    )
    return parser


def main(argv: Sequence[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=get_settings().log_level.upper())

    if args.transport == "http":
        import uvicorn
        from mcp.server.transport_security import TransportSecuritySettings

        mcp.settings.host = args.host
        mcp.settings.port = args.port
        mcp.settings.transport_security = TransportSecuritySettings(
            enable_dns_rebinding_protection=False,
        )
        logger.info("Serving crm-shadows over HTTP on %s:%d", args.host, args.port)
        uvicorn.run(
            mcp.streamable_http_app(),
            host=args.host,
            port=args.port,
            proxy_headers=True,
            forwarded_allow_ips=get_settings().forwarded_allow_ips,
        )
    else:
        mcp.run()


if __name__ == "__main__":
    main()
