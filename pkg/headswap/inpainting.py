"""
Inpaint clients: a local Jacobi fill and adapters for external inpainting models reached
over subprocess stdio or HTTP.

Wire protocol for the external transports (both directions are JSON objects):
    request:  {"image": <base64 PNG>, "mask": <base64 PNG>}
    response: {"image": <base64 PNG>}
"""

import base64
import io
import json
import logging
import subprocess
import threading
from abc import ABC, abstractmethod
from typing import List, Optional

import httpx
import numpy as np
from PIL import Image as PILImage

from .exceptions import InpaintProviderError, InvalidArgumentError
from .imagecore import Image, Mask
from .types import InpaintOptions

logger = logging.getLogger(__name__)

DEFAULT_MAX_IN_FLIGHT = 2


class InpaintClient(ABC):
    """
    Abstract base class for inpainters.

    Subclasses implement `fill`; callers use `inpaint`, which enforces the contract that
    pixels outside the mask come back bit-exact and limits the number of calls in flight.
    """

    name = "abstract"
    serial_only = False

    def __init__(self, max_in_flight: int = DEFAULT_MAX_IN_FLIGHT) -> None:
        if max_in_flight < 1:
            raise InvalidArgumentError("max_in_flight must be >= 1", "max_in_flight")
        self._slots = threading.BoundedSemaphore(1 if self.serial_only else max_in_flight)

    @abstractmethod
    def fill(self, image: np.ndarray, hole: np.ndarray) -> np.ndarray:
        """
        Fill the hole of an image.

        Args:
            image: (H, W, 3) float array in [0, 1]
            hole: (H, W) boolean array, True where pixels must be synthesized

        Returns:
            (H, W, 3) float array
        """
        pass

    @abstractmethod
    def is_available(self) -> bool:
        """Check if the inpainter can be reached."""
        pass

    def inpaint(self, image: Image, mask: Mask) -> Image:
        if image.shape != mask.shape:
            raise InvalidArgumentError(f"Mask shape {mask.shape} does not match image {image.shape}", "mask")
        hole = mask.data > 0.0
        if not hole.any():
            return image
        with self._slots:
            logger.info("Inpainting %d pixels with %s", int(hole.sum()), self.name)
            try:
                filled = np.asarray(self.fill(np.array(image.data), hole), dtype=np.float64)
            except InpaintProviderError:
                raise
            except Exception as e:
                raise InpaintProviderError(f"Inpaint client '{self.name}' failed: {str(e)}", self.name) from e
        if filled.shape != image.data.shape or not np.isfinite(filled).all():
            raise InpaintProviderError(
                f"Inpaint client '{self.name}' returned an invalid image of shape {filled.shape}", self.name
            )
        out = np.where(hole[..., None], np.clip(filled, 0.0, 1.0), image.data)
        return Image(out)

    def __call__(self, image: Image, mask: Mask) -> Image:
        return self.inpaint(image, mask)


class JacobiInpaintClient(InpaintClient):
    """Fill holes by repeated 4-neighbour averaging until the update falls below a tolerance."""

    name = "jacobi"

    def __init__(
        self,
        tolerance: float = 1e-4,
        max_iterations: int = 5000,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
    ) -> None:
        super().__init__(max_in_flight)
        self.tolerance = tolerance
        self.max_iterations = max_iterations

    def fill(self, image: np.ndarray, hole: np.ndarray) -> np.ndarray:
        out = image.copy()
        known = ~hole
        out[hole] = image[known].mean(axis=0) if known.any() else 0.5
        for _ in range(self.max_iterations):
            padded = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode="edge")
            average = (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]) / 4.0
            delta = np.abs(average[hole] - out[hole]).max()
            out[hole] = average[hole]
            if delta < self.tolerance:
                break
        return out

    def is_available(self) -> bool:
        return True


def _encode_png(array: np.ndarray) -> str:
    buffer = io.BytesIO()
    PILImage.fromarray(array).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def encode_request(image: np.ndarray, hole: np.ndarray) -> str:
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    mask = (hole.astype(np.uint8) * 255).astype(np.uint8)
    return json.dumps({"image": _encode_png(rgb), "mask": _encode_png(mask)})


def decode_response(payload: str, provider: str) -> np.ndarray:
    try:
        data = json.loads(payload)
        raw = base64.b64decode(data["image"])
        with PILImage.open(io.BytesIO(raw)) as handle:
            return np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
    except (ValueError, KeyError, TypeError, OSError) as e:
        raise InpaintProviderError(f"Malformed response from {provider}: {str(e)}", provider) from e


class SubprocessInpaintClient(InpaintClient):
    """Run an external inpainter once per request, speaking JSON over stdin/stdout."""

    name = "subprocess"

    def __init__(
        self,
        command: List[str],
        timeout: float = 120,
        serial_only: bool = False,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
    ) -> None:
        if not command:
            raise InvalidArgumentError("Subprocess inpaint client needs a command", "command")
        self.serial_only = serial_only
        super().__init__(max_in_flight)
        self.command = list(command)
        self.timeout = timeout

    def fill(self, image: np.ndarray, hole: np.ndarray) -> np.ndarray:
        try:
            result = subprocess.run(
                self.command,
                input=encode_request(image, hole),
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except subprocess.TimeoutExpired as e:
            raise InpaintProviderError(
                f"Inpaint command timed out after {self.timeout}s", self.name, {"timeout": self.timeout}
            ) from e
        except OSError as e:
            raise InpaintProviderError(f"Could not start inpaint command: {str(e)}", self.name) from e

        if result.returncode != 0:
            raise InpaintProviderError(
                f"Inpaint command failed:\nSTDOUT: {result.stdout}\nSTDERR: {result.stderr}",
                self.name,
                {"returncode": result.returncode},
            )
        return decode_response(result.stdout, self.name)

    def is_available(self) -> bool:
        return True


class HttpInpaintClient(InpaintClient):
    """POST requests to an inpainting service."""

    name = "http"

    def __init__(
        self,
        url: str,
        timeout: float = 120,
        serial_only: bool = False,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
    ) -> None:
        self.serial_only = serial_only
        super().__init__(max_in_flight)
        self.url = url.rstrip("/")
        self.timeout = timeout

    def fill(self, image: np.ndarray, hole: np.ndarray) -> np.ndarray:
        try:
            with httpx.Client(timeout=self.timeout) as client:
                response = client.post(
                    f"{self.url}/inpaint",
                    content=encode_request(image, hole),
                    headers={"Content-Type": "application/json"},
                )
                response.raise_for_status()
                return decode_response(response.text, self.name)
        except httpx.HTTPStatusError as e:
            raise InpaintProviderError(
                f"Inpaint service error {e.response.status_code}: {e.response.text}",
                self.name,
                {"status_code": e.response.status_code},
            ) from e
        except httpx.RequestError as e:
            raise InpaintProviderError(f"Inpaint service connection error: {str(e)}", self.name) from e

    def is_available(self) -> bool:
        try:
            with httpx.Client(timeout=5) as client:
                response = client.get(f"{self.url}/health")
                return response.status_code == 200
        except Exception:
            return False


class InpaintClientFactory:
    """Factory for creating inpaint clients from options."""

    @staticmethod
    def create_client(options: Optional[InpaintOptions] = None) -> InpaintClient:
        """
        Create an inpaint client.

        Args:
            options: Inpaint options; `transport` selects local, subprocess or http

        Returns:
            InpaintClient instance

        Raises:
            InpaintProviderError: If the transport is unknown or misconfigured
        """
        options = options or {}
        transport = options.get("transport", "local")
        max_in_flight = options.get("max_in_flight", DEFAULT_MAX_IN_FLIGHT)
        if transport == "local":
            return JacobiInpaintClient(
                tolerance=options.get("tolerance", 1e-4),
                max_iterations=options.get("max_iterations", 5000),
                max_in_flight=max_in_flight,
            )
        if transport == "subprocess":
            command = options.get("command")
            if not command:
                raise InpaintProviderError("Subprocess transport requires 'command'", "subprocess")
            return SubprocessInpaintClient(
                command,
                timeout=options.get("timeout", 120),
                serial_only=options.get("serial_only", False),
                max_in_flight=max_in_flight,
            )
        if transport == "http":
            url = options.get("url")
            if not url:
                raise InpaintProviderError("HTTP transport requires 'url'", "http")
            return HttpInpaintClient(
                url,
                timeout=options.get("timeout", 120),
                serial_only=options.get("serial_only", False),
                max_in_flight=max_in_flight,
            )
        raise InpaintProviderError(f"Unsupported inpaint transport: {transport}", str(transport))
