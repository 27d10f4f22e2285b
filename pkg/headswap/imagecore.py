"""
Image and mask value types plus the deterministic pixel operations the rest of the
library builds on.

Images are float64 rasters in [0, 1] with shape (H, W, 3); masks are float64 rasters
with shape (H, W). Conversion to 8-bit only happens in the PNG helpers at the bottom
of this module.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter, maximum_filter

from .exceptions import InvalidArgumentError

MIN_IMAGE_SIZE = 8

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Values this far outside [0, 1] are treated as float noise and clipped; anything
# further out is an error.
_RANGE_TOLERANCE = 1e-6

PathLike = Union[str, Path]


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Image:
    """Dense H x W x 3 raster with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidArgumentError(f"Image data must have shape (H, W, 3), got {data.shape}", "data")
        if data.shape[0] < MIN_IMAGE_SIZE or data.shape[1] < MIN_IMAGE_SIZE:
            raise InvalidArgumentError(
                f"Image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {data.shape[:2]}", "data"
            )
        if not np.isfinite(data).all():
            raise InvalidArgumentError("Image contains non-finite values", "data")
        if data.min() < -_RANGE_TOLERANCE or data.max() > 1.0 + _RANGE_TOLERANCE:
            raise InvalidArgumentError(
                f"Image values must lie in [0, 1], got [{data.min():.6g}, {data.max():.6g}]", "data"
            )
        object.__setattr__(self, "data", _readonly(np.clip(data, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @classmethod
    def constant(cls, height: int, width: int, value: Union[float, Tuple[float, float, float]]) -> "Image":
        data = np.empty((height, width, 3), dtype=np.float64)
        data[...] = value
        return cls(data)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> "Image":
        """Build an Image from a (3, H, W) or (1, 3, H, W) tensor."""
        if tensor.dim() == 4:
            if tensor.shape[0] != 1:
                raise InvalidArgumentError("from_tensor expects a single image, got a batch", "tensor")
            tensor = tensor[0]
        array = tensor.detach().to("cpu", torch.float64).permute(1, 2, 0).numpy()
        return cls(np.clip(array, 0.0, 1.0))

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Return a (1, 3, H, W) tensor."""
        return torch.tensor(self.data.transpose(2, 0, 1), dtype=dtype).unsqueeze(0)

    def allclose(self, other: "Image", atol: float = 1e-6) -> bool:
        return self.shape == other.shape and bool(np.allclose(self.data, other.data, atol=atol, rtol=0.0))


@dataclass(frozen=True, eq=False)
class Mask:
    """H x W mask; hard masks hold only 0/1, soft masks hold weights in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2:
            raise InvalidArgumentError(f"Mask data must have shape (H, W), got {data.shape}", "data")
        if data.size == 0:
            raise InvalidArgumentError("Mask must not be empty", "data")
        if not np.isfinite(data).all():
            raise InvalidArgumentError("Mask contains non-finite values", "data")
        if data.min() < -_RANGE_TOLERANCE or data.max() > 1.0 + _RANGE_TOLERANCE:
            raise InvalidArgumentError("Mask values must lie in [0, 1]", "data")
        object.__setattr__(self, "data", _readonly(np.clip(data, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def soft(self) -> bool:
        """True iff some value lies strictly inside (0, 1)."""
        return bool(np.any((self.data > 0.0) & (self.data < 1.0)))

    @property
    def is_hard(self) -> bool:
        return not self.soft

    @property
    def area(self) -> float:
        return float(self.data.sum())

    def is_empty(self) -> bool:
        return not bool(np.any(self.data > 0.0))

    def to_bool(self) -> np.ndarray:
        return self.data > 0.5

    @classmethod
    def zeros(cls, height: int, width: int) -> "Mask":
        return cls(np.zeros((height, width)))

    @classmethod
    def ones(cls, height: int, width: int) -> "Mask":
        return cls(np.ones((height, width)))

    @classmethod
    def from_bool(cls, array: np.ndarray) -> "Mask":
        return cls(np.asarray(array, dtype=bool).astype(np.float64))

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> "Mask":
        """Build a Mask from a (H, W), (1, H, W) or (1, 1, H, W) tensor."""
        array = tensor.detach().to("cpu", torch.float64).reshape(tensor.shape[-2], tensor.shape[-1]).numpy()
        return cls(np.clip(array, 0.0, 1.0))

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Return a (1, 1, H, W) tensor."""
        return torch.tensor(self.data, dtype=dtype)[None, None]

    def subset_of(self, other: "Mask") -> bool:
        return bool(np.all(self.data <= other.data))

    def equals(self, other: "Mask") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class CropSpec:
    """Square crop window centered at (row, col)."""

    center: Tuple[float, float]
    size: int
    semantic: Literal["face", "head"] = "head"

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise InvalidArgumentError(f"Crop size must be positive, got {self.size}", "size")
        if self.semantic not in ("face", "head"):
            raise InvalidArgumentError(f"Unknown crop semantic '{self.semantic}'", "semantic")

    @classmethod
    def central(cls, height: int, width: int, fraction: float, semantic: Literal["face", "head"] = "face") -> "CropSpec":
        size = max(1, int(round(fraction * min(height, width))))
        return cls(center=(height / 2.0, width / 2.0), size=size, semantic=semantic)

    def window(self, height: int, width: int) -> Tuple[int, int, int, int]:
        """Clamped (top, left, crop_h, crop_w) inside a height x width image."""
        crop_h = min(self.size, height)
        crop_w = min(self.size, width)
        top = int(math.floor(self.center[0] - crop_h / 2.0))
        left = int(math.floor(self.center[1] - crop_w / 2.0))
        top = min(max(top, 0), height - crop_h)
        left = min(max(left, 0), width - crop_w)
        return top, left, crop_h, crop_w


def _check_same_shape(a: Tuple[int, int], b: Tuple[int, int], what: str) -> None:
    if a != b:
        raise InvalidArgumentError(f"Shape mismatch in {what}: {a} vs {b}", what)


def default_dilation_radius(height: int, width: int) -> int:
    return int(math.ceil(0.05 * min(height, width)))


def luma(data: np.ndarray) -> np.ndarray:
    """BT.601 luma of an (..., 3) array."""
    return data[..., 0] * LUMA_WEIGHTS[0] + data[..., 1] * LUMA_WEIGHTS[1] + data[..., 2] * LUMA_WEIGHTS[2]


def luma_tensor(images: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of a (B, 3, H, W) tensor, returned as (B, 1, H, W)."""
    r, g, b = images[:, 0:1], images[:, 1:2], images[:, 2:3]
    return r * LUMA_WEIGHTS[0] + g * LUMA_WEIGHTS[1] + b * LUMA_WEIGHTS[2]


def to_gray(img: Image) -> Image:
    """Replace every pixel by its BT.601 luma replicated over three channels."""
    data = img.data
    if np.array_equal(data[..., 0], data[..., 1]) and np.array_equal(data[..., 1], data[..., 2]):
        # already gray
        return Image(data)
    y = luma(data)
    return Image(np.repeat(y[..., None], 3, axis=2))


def dilate(m: Mask, radius: int) -> Mask:
    """Dilate a hard mask by a square (Chebyshev) structuring element."""
    if radius < 0:
        raise InvalidArgumentError(f"Dilation radius must be >= 0, got {radius}", "radius")
    if m.soft:
        raise InvalidArgumentError("dilate requires a hard mask", "m")
    if radius == 0:
        return Mask(m.data)
    out = maximum_filter(m.data, size=2 * radius + 1, mode="constant", cval=0.0)
    return Mask(out)


def feather(m: Mask, sigma: float = 2.0) -> Mask:
    """Soft mask: the hard mask blurred by a Gaussian of the given pixel sigma."""
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be >= 0, got {sigma}", "sigma")
    if sigma == 0:
        return Mask(m.data)
    return Mask(np.clip(gaussian_filter(m.data, sigma=sigma, mode="constant", cval=0.0), 0.0, 1.0))


def mask_sub(a: Mask, b: Mask) -> Mask:
    _check_same_shape(a.shape, b.shape, "mask_sub")
    return Mask(np.maximum(a.data - b.data, 0.0))


def mask_union(a: Mask, b: Mask) -> Mask:
    _check_same_shape(a.shape, b.shape, "mask_union")
    return Mask(np.maximum(a.data, b.data))


def mask_intersection(a: Mask, b: Mask) -> Mask:
    _check_same_shape(a.shape, b.shape, "mask_intersection")
    return Mask(np.minimum(a.data, b.data))


def mask_invert(m: Mask) -> Mask:
    return Mask(1.0 - m.data)


def apply_mask(img: Image, m: Mask) -> Image:
    _check_same_shape(img.shape, m.shape, "apply_mask")
    return Image(img.data * m.data[..., None])


def crop(img: Image, spec: CropSpec) -> Image:
    top, left, crop_h, crop_w = spec.window(img.height, img.width)
    return Image(img.data[top : top + crop_h, left : left + crop_w])


def resize(img: Image, height: int, width: int) -> Image:
    """Bilinear resize (half-pixel centers)."""
    if height < MIN_IMAGE_SIZE or width < MIN_IMAGE_SIZE:
        raise InvalidArgumentError(f"Degenerate target size {height}x{width}", "size")
    if (height, width) == img.shape:
        return Image(img.data)
    tensor = img.to_tensor(torch.float64)
    out = F.interpolate(tensor, size=(height, width), mode="bilinear", align_corners=False)
    return Image.from_tensor(out.clamp(0.0, 1.0))


def _to_uint8(data: np.ndarray) -> np.ndarray:
    # np.round is round-half-to-even
    return np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(data: np.ndarray) -> np.ndarray:
    """Snap values onto the 8-bit grid used by the PNG helpers."""
    return _to_uint8(data).astype(np.float64) / 255.0


def save_image(img: Image, path: PathLike) -> None:
    PILImage.fromarray(_to_uint8(img.data)).save(str(path), format="PNG")


def read_png(path: PathLike, mode: str) -> np.ndarray:
    """Decode a PNG into a uint8 array in the given PIL mode."""
    try:
        with PILImage.open(str(path)) as handle:
            return np.asarray(handle.convert(mode), dtype=np.uint8)
    except OSError as e:
        raise InvalidArgumentError(f"Cannot read image {path}: {str(e)}", "path") from e


def load_image(path: PathLike) -> Image:
    return Image(read_png(path, "RGB").astype(np.float64) / 255.0)


def save_mask(m: Mask, path: PathLike) -> None:
    PILImage.fromarray(_to_uint8(m.data)).save(str(path), format="PNG")


def load_mask(path: PathLike) -> Mask:
    return Mask(read_png(path, "L").astype(np.float64) / 255.0)
