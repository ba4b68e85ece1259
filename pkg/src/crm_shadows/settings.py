"""Runtime settings: resource caps, numerical tolerances, logging."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv(Path.cwd() / ".env")


class Settings(BaseSettings):
    """Environment-driven settings (prefix ``CRM_``)."""

    model_config = SettingsConfigDict(env_prefix="CRM_", extra="ignore")

    # Resource caps (qubits)
    max_state_qubits: int = 16
    max_support_qubits: int = 12
    max_enumeration_qubits: int = 8
    max_density_qubits: int = 10
    dense_eigensolver_max_qubits: int = 12

    # Tolerances
    hermitian_tol: float = 1e-10
    trace_tol: float = 1e-10
    psd_tol: float = 1e-8
    norm_tol: float = 1e-10

    # Entropy polynomial machinery
    alpha_grid_points: int = 1_000_000
    exact_rational_max_order: int = 8

    workers: int = 1
    log_level: str = "WARNING"

    # MCP server defaults
    mcp_transport: Literal["stdio", "http"] = "stdio"
    mcp_host: str = "127.0.0.1"
    mcp_port: int = Field(default=8000, ge=1, le=65535)
    forwarded_allow_ips: str = "127.0.0.1"


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Return the process-wide settings instance."""
    return Settings()
