"""
Exception classes for the headswap library.
"""

from typing import Any, Dict, Optional


class HeadSwapError(Exception):
    """Base exception class for all headswap errors."""

    exit_code = 1

    def __init__(self, message: str, error_type: str = "unknown", context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.message = message
        self.error_type = error_type
        self.context = context or {}


class InvalidArgumentError(HeadSwapError):
    """Raised when an operation receives an argument outside its contract."""

    exit_code = 2

    def __init__(self, message: str, argument: Optional[str] = None, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, "invalid_argument", context)
        self.argument = argument


class ConfigurationError(HeadSwapError):
    """Raised when a configuration file, environment variable or flag is invalid."""

    exit_code = 2

    def __init__(self, message: str, config_key: Optional[str] = None, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, "configuration", context)
        self.config_key = config_key


class ProviderError(HeadSwapError):
    """Raised when a pluggable provider (feature, segmentation, inpainting) fails."""

    exit_code = 3

    def __init__(
        self,
        message: str,
        provider: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
        error_type: str = "provider",
    ) -> None:
        super().__init__(message, error_type, context)
        self.provider = provider


class UnavailableProviderError(ProviderError):
    """Raised when no registered provider can serve a request."""

    def __init__(self, message: str, provider: Optional[str] = None, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, provider, context, error_type="unavailable_provider")


class InpaintProviderError(ProviderError):
    """Raised when an inpaint client fails or violates its contract."""

    def __init__(self, message: str, provider: Optional[str] = None, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, provider, context, error_type="inpaint_provider")


class NumericFailureError(HeadSwapError):
    """Raised when activations or losses stop being finite."""

    exit_code = 4

    def __init__(
        self,
        message: str,
        layer: Optional[str] = None,
        checkpoint: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
    ) -> None:
        super().__init__(message, "numeric_failure", context)
        self.layer = layer
        self.checkpoint = checkpoint


class CheckpointError(HeadSwapError):
    """Raised when a checkpoint cannot be written or read back."""

    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, "checkpoint", context)
        self.path = path


class StageError(HeadSwapError):
    """Raised by the swap pipeline, naming the stage that failed."""

    def __init__(self, message: str, stage: str, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, "stage", context)
        self.stage = stage

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        cause = self.__cause__
        if isinstance(cause, HeadSwapError):
            return cause.exit_code
        return 1


class EmptyRegionSignal(HeadSwapError):
    """Raised when a correlation is requested over an empty region; callers fall back."""

    def __init__(self, message: str, region: Optional[str] = None, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, "empty_region", context)
        self.region = region
