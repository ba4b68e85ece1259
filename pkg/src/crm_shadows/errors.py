"""Exception hierarchy. Every error renders to the ``{"error", "message"}`` dict shape."""

from __future__ import annotations

from typing import Any


class CRMError(Exception):
    """Base class for all library errors."""

    code = "error"

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.code, "message": str(self)}


class ArgumentError(CRMError, ValueError):
    code = "argument_error"


class DimensionError(ArgumentError):
    code = "dimension_error"


class ValidationError(CRMError, ValueError):
    code = "validation_error"


class ResourceError(CRMError):
    code = "resource_error"


class SingularityError(CRMError, ArithmeticError):
    code = "singularity_error"


class ProtocolError(CRMError):
    code = "protocol_error"


class ConfigError(CRMError):
    code = "config_error"

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.code, "field": self.field, "message": str(self)}
