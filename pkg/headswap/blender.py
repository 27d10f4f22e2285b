"""
Blending stage: mask preprocessing, inpainting-mask augmentation, background references,
the blending UNet and the hair refinement / post-processing helpers.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BlenderConfig, InpaintMaskPolicy, RefCreateConfig
from .exceptions import InvalidArgumentError
from .imagecore import (
    Image,
    Mask,
    apply_mask,
    default_dilation_radius,
    dilate,
    mask_invert,
    mask_sub,
    mask_union,
    to_gray,
)
from .inpainting import InpaintClient
from .layers import MultiScaleDiscriminator, check_finite, seeded
from .refcreate import FeaturePyramid
from .segmentation import SegMap, hair_mask, head_mask

logger = logging.getLogger(__name__)

BLEND_CHANNELS = 14


@dataclass(frozen=True)
class MaskBundle:
    """Masks and images derived from the reenacted and target segmentations."""

    head_A: Mask
    head_T: Mask
    union: Mask
    dilated_A: Mask
    dilated_T: Mask
    inpaint_A: Mask
    inpaint_T: Mask
    background_T: Image
    gray_head_A: Image

    def violations(self) -> List[str]:
        """Names of the bundle invariants that do not hold; empty when consistent."""
        found: List[str] = []
        head = self.head_A.to_bool()
        inpaint = self.inpaint_A.to_bool()
        if np.any(head & inpaint):
            found.append("inpaint_A intersects head_A")
        if not np.array_equal(head | inpaint, self.dilated_A.to_bool()):
            found.append("inpaint_A | head_A != dilated_A")
        if np.any(self.background_T.data[self.dilated_A.to_bool()] != 0.0):
            found.append("background_T nonzero inside dilated_A")
        gray = self.gray_head_A.data
        if np.any(gray[~head] != 0.0):
            found.append("gray_head_A nonzero outside head_A")
        if not (np.array_equal(gray[..., 0], gray[..., 1]) and np.array_equal(gray[..., 1], gray[..., 2])):
            found.append("gray_head_A is not gray")
        return found


def preprocess(
    I_A: Image,
    seg_A: SegMap,
    I_T: Image,
    seg_T: SegMap,
    dilation_radius: Optional[int] = None,
    include_neck: bool = False,
) -> MaskBundle:
    """
    Derive the blending masks.

    The enlarged reenacted head is the dilation of the union of both heads; the enlarged
    target head is the dilation of the target head alone.

    Args:
        I_A: Reenacted image
        seg_A: Segmentation of I_A
        I_T: Target image
        seg_T: Segmentation of I_T
        dilation_radius: Square dilation radius in pixels; defaults to 5% of the short side
        include_neck: Treat the neck as part of the head

    Returns:
        MaskBundle

    Raises:
        InvalidArgumentError: If any shapes differ
    """
    shape = I_A.shape
    for name, other in (("seg_A", seg_A.shape), ("I_T", I_T.shape), ("seg_T", seg_T.shape)):
        if other != shape:
            raise InvalidArgumentError(f"{name} has shape {other}, expected {shape}", name)
    radius = default_dilation_radius(*shape) if dilation_radius is None else dilation_radius

    head_A = head_mask(seg_A, include_neck)
    head_T = head_mask(seg_T, include_neck)
    union = mask_union(head_A, head_T)
    dilated_A = dilate(union, radius)
    dilated_T = dilate(head_T, radius)
    return MaskBundle(
        head_A=head_A,
        head_T=head_T,
        union=union,
        dilated_A=dilated_A,
        dilated_T=dilated_T,
        inpaint_A=mask_sub(dilated_A, head_A),
        inpaint_T=mask_sub(dilated_T, head_T),
        background_T=apply_mask(I_T, mask_invert(dilated_A)),
        gray_head_A=to_gray(apply_mask(I_A, head_A)),
    )


def _ellipse(shape: Tuple[int, int], center: Tuple[int, int], radii: Tuple[int, int]) -> np.ndarray:
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    return ((rows - center[0]) / radii[0]) ** 2 + ((cols - center[1]) / radii[1]) ** 2 <= 1.0


def augment_inpaint_mask(m: Mask, policy: InpaintMaskPolicy, rng: np.random.Generator) -> Mask:
    """
    Grow the inpainting mask with a random dilation and random elliptical blobs seeded on
    the existing region. Each step is kept only while the area stays within the policy's
    bound, so the result contains the input and is at most max_area_ratio times its area.
    """
    if not policy.enabled or m.is_empty():
        return m
    if m.soft:
        raise InvalidArgumentError("augment_inpaint_mask requires a hard mask", "m")
    budget = policy.max_area_ratio * m.area
    current = m.to_bool()

    growth = int(rng.integers(0, policy.max_growth + 1))
    if growth:
        grown = dilate(Mask.from_bool(current), growth).to_bool()
        if grown.sum() <= budget:
            current = grown

    low, high = policy.blob_radius
    for _ in range(int(rng.integers(0, policy.max_blobs + 1))):
        rows, cols = np.nonzero(current)
        pick = int(rng.integers(0, rows.size))
        radii = (int(rng.integers(low, high + 1)), int(rng.integers(low, high + 1)))
        candidate = current | _ellipse(current.shape, (rows[pick], cols[pick]), radii)
        if candidate.sum() <= budget:
            current = candidate
    return Mask.from_bool(current)


def background_reference(I_T: Image, M_T_I: Mask, client: InpaintClient) -> Image:
    """Inpaint the target over M_T^I; pixels outside the mask come back unchanged."""
    return client.inpaint(I_T, M_T_I)


def extrapolate_background(I_T: Image, M_A_H: Mask, client: InpaintClient, radius: Optional[int] = None) -> Image:
    """Target background continued under a slightly enlarged reenacted head."""
    radius = default_dilation_radius(*I_T.shape) if radius is None else radius
    return client.inpaint(I_T, dilate(M_A_H, radius))


@dataclass(frozen=True)
class BlendInputs:
    """The six operands of the blending network."""

    head_reference: Image
    inpaint_reference: Image
    head_mask: Mask
    background: Image
    inpaint_mask: Mask
    gray_head: Image

    def __post_init__(self) -> None:
        shape = self.head_reference.shape
        for name in ("inpaint_reference", "head_mask", "background", "inpaint_mask", "gray_head"):
            value = getattr(self, name)
            if value is None:
                raise InvalidArgumentError(f"BlendInputs.{name} is required", name)
            if value.shape != shape:
                raise InvalidArgumentError(f"BlendInputs.{name} has shape {value.shape}, expected {shape}", name)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.head_reference.shape

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """(1, 14, H, W) in operand order."""
        return blend_input_tensor(
            self.head_reference.to_tensor(dtype),
            self.inpaint_reference.to_tensor(dtype),
            self.head_mask.to_tensor(dtype),
            self.background.to_tensor(dtype),
            self.inpaint_mask.to_tensor(dtype),
            self.gray_head.to_tensor(dtype),
        )

    def as_dict(self) -> Dict[str, Any]:
        return {
            "head_reference": self.head_reference,
            "inpaint_reference": self.inpaint_reference,
            "head_mask": self.head_mask,
            "background": self.background,
            "inpaint_mask": self.inpaint_mask,
            "gray_head": self.gray_head,
        }


def blend_input_tensor(
    head_reference: torch.Tensor,
    inpaint_reference: torch.Tensor,
    head_mask: torch.Tensor,
    background: torch.Tensor,
    inpaint_mask: torch.Tensor,
    gray_head: torch.Tensor,
) -> torch.Tensor:
    return torch.cat([head_reference, inpaint_reference, head_mask, background, inpaint_mask, gray_head], dim=1)


class BlendingUNet(nn.Module):
    """Encoder-decoder with skip connections over the 14-channel operand stack."""

    def __init__(self, in_channels: int = BLEND_CHANNELS, base_channels: int = 32, levels: int = 4) -> None:
        super().__init__()
        if in_channels != BLEND_CHANNELS:
            raise InvalidArgumentError(f"Blending UNet takes {BLEND_CHANNELS} channels, got {in_channels}", "in_channels")
        widths = [base_channels * min(2**i, 8) for i in range(levels)]
        self.inc = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 1, 1), nn.LeakyReLU(0.2))
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i - 1], widths[i], 4, 2, 1), nn.InstanceNorm2d(widths[i]), nn.LeakyReLU(0.2))
            for i in range(1, levels)
        )
        self.up = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i] + widths[i - 1], widths[i - 1], 3, 1, 1), nn.InstanceNorm2d(widths[i - 1]), nn.ReLU())
            for i in range(levels - 1, 0, -1)
        )
        self.outc = nn.Conv2d(widths[0], 3, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != BLEND_CHANNELS:
            raise InvalidArgumentError(f"Expected (B, {BLEND_CHANNELS}, H, W) input, got {tuple(x.shape)}", "inputs")
        x = self.inc(x)
        skips = [x]
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.outc(x))


class BlenderModel(nn.Module):
    """Trainable parameters of the blending stage: feature pyramid, UNet and discriminator."""

    def __init__(self, config: Optional[BlenderConfig] = None, refcreate: Optional[RefCreateConfig] = None) -> None:
        super().__init__()
        self.config = config or BlenderConfig()
        self.refcreate = refcreate or RefCreateConfig()
        with seeded(self.refcreate.seed):
            self.pyramid = FeaturePyramid(self.refcreate.feature_dim, self.refcreate.levels, self.refcreate.base_channels)
        with seeded(self.config.seed):
            self.unet = BlendingUNet(BLEND_CHANNELS, self.config.base_channels, self.config.levels)
            self.discriminator = MultiScaleDiscriminator(
                3, self.config.disc_base_channels, self.config.disc_layers, self.config.disc_scales
            )

    def generator_parameters(self) -> List[nn.Parameter]:
        return list(self.pyramid.parameters()) + list(self.unet.parameters())

    def discriminator_parameters(self) -> List[nn.Parameter]:
        return list(self.discriminator.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Blend a (B, 14, H, W) operand stack, compositing onto the background if configured."""
        raw = check_finite(self.unet(x), "unet")
        if not self.config.composite_background:
            return raw
        head_mask = x[:, 6:7]
        background = x[:, 7:10]
        inpaint_mask = x[:, 10:11]
        region = torch.maximum(head_mask, inpaint_mask)
        return region * raw + (1.0 - region) * background


def blend(inputs: BlendInputs, params: BlenderModel) -> Image:
    """
    Run the blending network on one set of operands.

    Raises:
        NumericFailureError: If the network produces non-finite values
    """
    resolution = params.config.resolution
    if inputs.shape != (resolution, resolution):
        raise InvalidArgumentError(f"Blend inputs must be {resolution}x{resolution}, got {inputs.shape}", "inputs")
    dtype = next(params.parameters()).dtype
    params.eval()
    with torch.no_grad():
        out = params(inputs.to_tensor(dtype))
    return Image.from_tensor(out.clamp(0.0, 1.0))


def refine_hair(I_A: Image, I_ext: Image, M_soft: Mask) -> Image:
    """M_soft * I_A + (1 - M_soft) * I_ext per pixel."""
    for name, shape in (("I_ext", I_ext.shape), ("M_soft", M_soft.shape)):
        if shape != I_A.shape:
            raise InvalidArgumentError(f"{name} has shape {shape}, expected {I_A.shape}", name)
    weight = M_soft.data[..., None]
    return Image(weight * I_A.data + (1.0 - weight) * I_ext.data)


def excess_hair_mask(seg_T: SegMap, seg_A: SegMap, include_neck: bool = False) -> Mask:
    """Target hair not covered by the reenacted head."""
    if seg_T.shape != seg_A.shape:
        raise InvalidArgumentError(f"SegMap shapes differ: {seg_T.shape} vs {seg_A.shape}", "seg_A")
    return mask_sub(hair_mask(seg_T), head_mask(seg_A, include_neck))


def postprocess(I_B: Image, M_inpainting: Mask, client: InpaintClient, enabled: bool = True) -> Image:
    """Optional refill of leftover target hair; identity when disabled or the mask is empty."""
    if not enabled or M_inpainting.is_empty():
        return I_B
    return client.inpaint(I_B, M_inpainting)
