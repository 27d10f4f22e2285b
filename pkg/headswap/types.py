"""
Type definitions for the headswap library.
"""

from typing import Any, Dict, List, Literal

from typing_extensions import NotRequired, TypedDict

# Per-region record of where reference colors came from:
# "matched", "fallback:<region>" or "copied"
Provenance = Dict[str, str]

LogLevel = Literal["off", "error", "warn", "info", "debug", "trace"]


class InpaintOptions(TypedDict, total=False):
    """Configuration options for inpaint clients."""

    transport: Literal["local", "subprocess", "http"]
    command: List[str]  # subprocess transport
    url: str  # http transport
    timeout: float  # seconds
    max_in_flight: int
    serial_only: bool
    tolerance: float  # local Jacobi fill
    max_iterations: int  # local Jacobi fill


class SwapOptions(TypedDict, total=False):
    """Options for a single swap call."""

    postprocess: bool
    dilation_radius: int
    tau: float
    include_neck: bool
    log_level: LogLevel
    log_file: str


class SwapResult(TypedDict):
    """Result from swap_safe."""

    success: bool
    artifacts: NotRequired[Dict[str, Any]]
    error: NotRequired[str]
    error_type: NotRequired[str]
    stage: NotRequired[str]
