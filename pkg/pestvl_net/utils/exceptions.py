"""
Custom exceptions for PestVL-Net.
"""

from enum import Enum
from typing import Any, Dict, List, Optional


class ErrorCode(str, Enum):
    """Standard error codes for the package."""

    # General errors
    INTERNAL_ERROR = "INTERNAL_ERROR"
    CONFIG_ERROR = "CONFIG_ERROR"
    VALIDATION_ERROR = "VALIDATION_ERROR"

    # Data and artifact errors
    DATA_ERROR = "DATA_ERROR"
    FORMAT_ERROR = "FORMAT_ERROR"
    LOOKUP_MISS = "LOOKUP_MISS"

    # Training errors
    TRAINING_DIVERGED = "TRAINING_DIVERGED"

    # External service errors
    EXTERNAL_SERVICE_ERROR = "EXTERNAL_SERVICE_ERROR"
    AUTH_ERROR = "AUTH_ERROR"
    TIMEOUT = "TIMEOUT"
    MALFORMED_RESPONSE = "MALFORMED_RESPONSE"


class PestVLError(Exception):
    """Base exception class for PestVL-Net."""

    def __init__(
        self,
        message: str,
        error_code: ErrorCode = ErrorCode.INTERNAL_ERROR,
        details: Optional[Dict[str, Any]] = None,
        suggestions: Optional[List[str]] = None,
    ):
        """Initialize the exception with error information."""
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        self.suggestions = suggestions or []
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """Convert exception to a dictionary for JSON summaries."""
        result: Dict[str, Any] = {
            "error_code": self.error_code.value,
            "message": self.message,
        }

        if self.details:
            result["details"] = self.details

        if self.suggestions:
            result["suggestions"] = self.suggestions

        return result


class ConfigError(PestVLError):
    """Exception raised for invalid configuration files or overrides."""

    def __init__(self, message: str, key: Optional[str] = None, **kwargs: Any):
        super().__init__(
            message,
            error_code=ErrorCode.CONFIG_ERROR,
            details={"key": key} if key else None,
            **kwargs,
        )
        self.key = key


class ValidationError(PestVLError):
    """Exception raised when an operation receives invalid input."""

    def __init__(
        self,
        message: str,
        field_errors: Optional[Dict[str, List[str]]] = None,
        **kwargs: Any,
    ):
        kwargs.setdefault(
            "details", {"field_errors": field_errors} if field_errors else None
        )
        super().__init__(message, error_code=ErrorCode.VALIDATION_ERROR, **kwargs)
        self.field_errors = field_errors or {}


class SpectralDomainError(ValidationError):
    """Exception raised for inputs outside the domain of the spectral pipeline."""


class ShapeMismatchError(ValidationError):
    """Exception raised when tensor shapes do not conform."""

    def __init__(self, operation: str, expected: Any, actual: Any, **kwargs: Any):
        super().__init__(
            f"{operation}: expected shape {expected}, got {actual}",
            details={"operation": operation, "expected": str(expected), "actual": str(actual)},
            **kwargs,
        )


class PartitionLayoutError(ValidationError):
    """Exception raised when a feature map cannot be tiled by a window layout."""

    def __init__(self, height: int, width: int, grid_side: int, **kwargs: Any):
        super().__init__(
            f"Feature of size {height}x{width} cannot be partitioned by a "
            f"{grid_side}x{grid_side} window grid",
            details={"height": height, "width": width, "grid_side": grid_side},
            suggestions=["Use feature sides divisible by 4"],
            **kwargs,
        )


class PromptTemplateError(ValidationError):
    """Exception raised when a prompt template references an unbound placeholder."""

    def __init__(self, placeholder: str, **kwargs: Any):
        super().__init__(
            f"Unbound placeholder '{{{placeholder}}}' in prompt template",
            details={"placeholder": placeholder},
            **kwargs,
        )
        self.placeholder = placeholder


class DataError(PestVLError):
    """Base exception for dataset and artifact problems."""

    def __init__(
        self,
        message: str,
        error_code: ErrorCode = ErrorCode.DATA_ERROR,
        **kwargs: Any,
    ):
        super().__init__(message, error_code=error_code, **kwargs)


class DatasetError(DataError):
    """Exception raised for malformed dataset trees."""

    def __init__(self, message: str, class_name: Optional[str] = None, **kwargs: Any):
        super().__init__(
            message,
            details={"class_name": class_name} if class_name else None,
            **kwargs,
        )
        self.class_name = class_name


class CaptionStoreError(DataError):
    """Exception raised for unreadable caption JSON Lines files."""

    def __init__(self, path: str, line_number: int, reason: str, **kwargs: Any):
        super().__init__(
            f"{path}:{line_number}: malformed caption record ({reason})",
            error_code=ErrorCode.FORMAT_ERROR,
            details={"path": path, "line_number": line_number},
            **kwargs,
        )
        self.line_number = line_number


class EmbeddingStoreError(DataError):
    """Exception raised for corrupted embedding store files."""

    def __init__(self, message: str, **kwargs: Any):
        super().__init__(message, error_code=ErrorCode.FORMAT_ERROR, **kwargs)


class EmbeddingLookupError(DataError):
    """Exception raised when a caption has no precomputed embedding."""

    def __init__(self, caption_hash: str, **kwargs: Any):
        super().__init__(
            f"No precomputed embedding for caption hash {caption_hash}",
            error_code=ErrorCode.LOOKUP_MISS,
            details={"caption_hash": caption_hash},
            suggestions=["Run encode-text for the caption store first"],
            **kwargs,
        )
        self.caption_hash = caption_hash


class CheckpointFormatError(DataError):
    """Exception raised for corrupted or incompatible checkpoint files."""

    def __init__(self, message: str, **kwargs: Any):
        super().__init__(message, error_code=ErrorCode.FORMAT_ERROR, **kwargs)


class TrainingDivergedError(PestVLError):
    """Exception raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int, batch: int, loss: float, **kwargs: Any):
        super().__init__(
            f"Non-finite loss {loss} at epoch {epoch}, batch {batch}",
            error_code=ErrorCode.TRAINING_DIVERGED,
            details={"epoch": epoch, "batch": batch},
            suggestions=["Lower optimizer.lr", "Set optimizer.max_grad_norm"],
            **kwargs,
        )
        self.epoch = epoch
        self.batch = batch


class ExternalServiceError(PestVLError):
    """Exception raised for external service failures."""

    def __init__(
        self,
        service_name: str,
        message: str,
        status_code: Optional[int] = None,
        error_code: ErrorCode = ErrorCode.EXTERNAL_SERVICE_ERROR,
        **kwargs: Any,
    ):
        super().__init__(
            f"{service_name} service error: {message}",
            error_code=error_code,
            details={"service_name": service_name, "status_code": status_code},
            **kwargs,
        )
        self.status_code = status_code


class TransientServiceError(ExternalServiceError):
    """Retryable failure (5xx, 429, connection reset)."""


class MllmAuthError(ExternalServiceError):
    """Exception raised when the MLLM endpoint rejects the credentials."""

    def __init__(self, status_code: int, **kwargs: Any):
        super().__init__(
            "mllm",
            "authentication rejected",
            status_code=status_code,
            error_code=ErrorCode.AUTH_ERROR,
            suggestions=["Check MLLM_API_KEY"],
            **kwargs,
        )


class MllmTimeoutError(ExternalServiceError):
    """Exception raised when every attempt against the MLLM endpoint failed transiently."""

    def __init__(self, attempts: int, last_error: str, **kwargs: Any):
        super().__init__(
            "mllm",
            f"gave up after {attempts} attempts: {last_error}",
            error_code=ErrorCode.TIMEOUT,
            suggestions=["Try again later", "Raise MLLM_MAX_ATTEMPTS"],
            **kwargs,
        )
        self.attempts = attempts


class MllmResponseError(ExternalServiceError):
    """Exception raised when the MLLM endpoint returns an unparseable body."""

    def __init__(self, reason: str, **kwargs: Any):
        super().__init__(
            "mllm",
            f"malformed response: {reason}",
            error_code=ErrorCode.MALFORMED_RESPONSE,
            **kwargs,
        )
