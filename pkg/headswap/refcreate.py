"""
Head color reference creation.

Dense per-pixel features come from a small feature pyramid. For every semantic region the
generated (A) and target (T) pixels are compared through the cosine of their channelwise
centralized features, and each A pixel takes a temperature-softmax weighted mix of the
target region's colors. Regions missing on the target side borrow a donor region from the
fallback table, or keep the colors of the generated image when no donor is large enough.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AugmentPolicy, RefCreateConfig
from .exceptions import EmptyRegionSignal, InvalidArgumentError
from .imagecore import Image, luma_tensor
from .layers import check_finite, seeded
from .segmentation import RegionSet, SegMap, region_masks
from .types import Provenance

logger = logging.getLogger(__name__)

# Centralized feature norms below this (relative to the feature scale) count as zero.
NORM_EPS = 1e-6

MATCHED = "matched"
COPIED = "copied"


def fallback_label(region: str) -> str:
    return f"fallback:{region}"


@dataclass(frozen=True, eq=False)
class DenseFeatures:
    """Per-pixel feature vectors stored channel-first as (D, H, W)."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.dim() != 3:
            raise InvalidArgumentError(f"Dense features must have shape (D, H, W), got {tuple(self.data.shape)}", "data")
        check_finite(self.data, "dense_features")

    @property
    def dim(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])

    def flat(self) -> torch.Tensor:
        """(H * W, D) rows in row-major pixel order."""
        return self.data.reshape(self.dim, -1).t()


class FeaturePyramid(nn.Module):
    """Bottom-up conv stages, top-down lateral fusion, all levels summed at full resolution."""

    def __init__(self, feature_dim: int = 64, levels: int = 3, base_channels: int = 16) -> None:
        super().__init__()
        self.feature_dim = feature_dim
        stages: List[nn.Module] = []
        laterals: List[nn.Module] = []
        in_channels = 3
        for i in range(levels):
            out_channels = base_channels * 2**i
            stride = 1 if i == 0 else 2
            stages.append(
                nn.Sequential(
                    nn.Conv2d(in_channels, out_channels, 3, stride, 1, padding_mode="replicate"),
                    nn.LeakyReLU(0.2),
                    nn.Conv2d(out_channels, out_channels, 3, 1, 1, padding_mode="replicate"),
                    nn.LeakyReLU(0.2),
                )
            )
            laterals.append(nn.Conv2d(out_channels, feature_dim, 1))
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList(laterals)
        self.smooth = nn.Conv2d(feature_dim, feature_dim, 3, 1, 1, padding_mode="replicate")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        x = x * 2.0 - 1.0
        bottom_up: List[torch.Tensor] = []
        for stage in self.stages:
            x = stage(x)
            bottom_up.append(x)

        top_down = self.laterals[-1](bottom_up[-1])
        fused = F.interpolate(top_down, size=size, mode="bilinear", align_corners=False)
        for i in range(len(bottom_up) - 2, -1, -1):
            lateral = self.laterals[i](bottom_up[i])
            top_down = lateral + F.interpolate(top_down, size=lateral.shape[-2:], mode="bilinear", align_corners=False)
            fused = fused + F.interpolate(top_down, size=size, mode="bilinear", align_corners=False)
        return self.smooth(fused)


def build_pyramid(config: Optional[RefCreateConfig] = None) -> FeaturePyramid:
    config = config or RefCreateConfig()
    with seeded(config.seed):
        return FeaturePyramid(config.feature_dim, config.levels, config.base_channels)


def extract_features(img: Union[Image, torch.Tensor], params: FeaturePyramid) -> DenseFeatures:
    """
    Dense features of one image.

    Args:
        img: Image, or a (1, 3, H, W) / (3, H, W) tensor when gradients are needed
        params: Feature pyramid

    Returns:
        DenseFeatures of shape (D, H, W)
    """
    if isinstance(img, Image):
        param = next(params.parameters())
        params.eval()
        with torch.no_grad():
            out = params(img.to_tensor(param.dtype))
        return DenseFeatures(out[0])
    batch = img if img.dim() == 4 else img.unsqueeze(0)
    return DenseFeatures(params(batch)[0])


@dataclass(frozen=True, eq=False)
class RegionCorrelation:
    """Cosine matrix between the A-side and T-side pixels of one region."""

    region: str
    gamma: torch.Tensor
    index_a: np.ndarray
    index_t: np.ndarray
    donor: Optional[str] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.gamma.shape[0]), int(self.gamma.shape[1])

    def weights(self, tau: float) -> torch.Tensor:
        """Row softmax of gamma / tau: how much each T pixel contributes to each A pixel."""
        _check_tau(tau)
        return torch.softmax(self.gamma / tau, dim=1)

    def reverse_weights(self, tau: float) -> torch.Tensor:
        """Softmax over A pixels for each T pixel, used to map colors back to T."""
        _check_tau(tau)
        return torch.softmax(self.gamma.t() / tau, dim=1)


def _check_tau(tau: float) -> None:
    if not tau > 0.0 or not math.isfinite(tau):
        raise InvalidArgumentError(f"Temperature must be positive, got {tau}", "tau")


def _centralize(rows: torch.Tensor) -> torch.Tensor:
    return rows - rows.mean(dim=0, keepdim=True)


def _as_index(region: Union[np.ndarray, Sequence[int]]) -> np.ndarray:
    return np.asarray(region, dtype=np.int64).reshape(-1)


def region_correlation(
    f_A: DenseFeatures,
    f_T: DenseFeatures,
    region_A: Union[np.ndarray, Sequence[int]],
    region_T: Union[np.ndarray, Sequence[int]],
    region: str = "",
) -> RegionCorrelation:
    """
    Correlation matrix of one semantic region.

    Features are centralized per channel over each side's region, then compared by cosine.
    Pairs where either centralized vector is (numerically) zero get a correlation of 0.

    Args:
        f_A: Features of the generated image
        f_T: Features of the target image
        region_A: Flat pixel indices of the region in A
        region_T: Flat pixel indices of the region in T
        region: Region name, recorded on the result

    Returns:
        RegionCorrelation with gamma of shape (N_A, N_T), entries in [-1, 1]

    Raises:
        EmptyRegionSignal: If either side of the region is empty
        InvalidArgumentError: If the feature dimensions differ
    """
    if f_A.dim != f_T.dim:
        raise InvalidArgumentError(f"Feature dims differ: {f_A.dim} vs {f_T.dim}", "features")
    index_a = _as_index(region_A)
    index_t = _as_index(region_T)
    if index_a.size == 0 or index_t.size == 0:
        raise EmptyRegionSignal(f"Region '{region}' is empty on one side", region)

    rows_a = _centralize(f_A.flat()[torch.from_numpy(index_a)])
    rows_t = _centralize(f_T.flat()[torch.from_numpy(index_t)])
    norm_a = rows_a.norm(dim=1)
    norm_t = rows_t.norm(dim=1)

    scale = max(1.0, float(rows_a.detach().abs().max()), float(rows_t.detach().abs().max()))
    threshold = NORM_EPS * scale * math.sqrt(f_A.dim)
    valid_a = norm_a > threshold
    valid_t = norm_t > threshold
    safe_a = torch.where(valid_a, norm_a, torch.ones_like(norm_a))
    safe_t = torch.where(valid_t, norm_t, torch.ones_like(norm_t))

    cosine = (rows_a / safe_a[:, None]) @ (rows_t / safe_t[:, None]).t()
    valid = valid_a[:, None] & valid_t[None, :]
    gamma = torch.where(valid, cosine, torch.zeros_like(cosine)).clamp(-1.0, 1.0)
    return RegionCorrelation(region=region, gamma=gamma, index_a=index_a, index_t=index_t)


def _flat_colors(img: Union[Image, torch.Tensor]) -> torch.Tensor:
    """(H * W, 3) colors in row-major pixel order."""
    if isinstance(img, Image):
        return torch.tensor(img.data.reshape(-1, 3))
    tensor = img[0] if img.dim() == 4 else img
    return tensor.reshape(3, -1).t()


def resample_region(corr: RegionCorrelation, I_T: Union[Image, torch.Tensor], tau: float) -> torch.Tensor:
    """
    Softmax-weighted target colors for every A pixel of the region.

    Returns:
        (N_A, 3) colors, each a convex combination of the target region's colors

    Raises:
        InvalidArgumentError: If tau <= 0
    """
    weights = corr.weights(tau)
    colors = _flat_colors(I_T)[torch.from_numpy(corr.index_t)].to(weights.dtype)
    return weights @ colors


def resample_back(corr: RegionCorrelation, I_TA: Union[Image, torch.Tensor], tau: float) -> torch.Tensor:
    """Map A-side colors back onto the T-side pixels through the transposed correlation."""
    weights = corr.reverse_weights(tau)
    colors = _flat_colors(I_TA)[torch.from_numpy(corr.index_a)].to(weights.dtype)
    return weights @ colors


@dataclass
class HeadReference:
    """Head color reference (3, H, W), the correlations that built it and per-region provenance."""

    image: torch.Tensor
    provenance: Provenance = field(default_factory=dict)
    correlations: List[RegionCorrelation] = field(default_factory=list)

    def to_image(self) -> Image:
        return Image.from_tensor(self.image.detach().clamp(0.0, 1.0))


def build_reference_tensor(
    f_A: DenseFeatures,
    regions_A: RegionSet,
    f_T: DenseFeatures,
    regions_T: RegionSet,
    I_T: torch.Tensor,
    tau: float,
    fallback: Mapping[str, str],
    min_donor: int,
    source_image: torch.Tensor,
) -> HeadReference:
    """
    Differentiable head reference; gradients flow into both feature maps.

    I_T and source_image are (3, H, W) or (1, 3, H, W) tensors. Pixels outside the A-side
    head regions are 0.
    """
    _check_tau(tau)
    h, w = regions_A.shape
    source_flat = _flat_colors(source_image)
    dtype = f_A.data.dtype
    out = torch.zeros(h * w, 3, dtype=dtype, device=f_A.data.device)
    provenance: Provenance = {}
    correlations: List[RegionCorrelation] = []

    for region in regions_A.nonempty():
        index_a = regions_A[region]
        donor: Optional[str] = None
        if regions_T.size(region) > 0:
            donor = region
        else:
            candidate = fallback.get(region)
            if candidate is not None and regions_T.size(candidate) >= min_donor:
                donor = candidate

        colors: torch.Tensor
        if donor is not None:
            try:
                corr = region_correlation(f_A, f_T, index_a, regions_T[donor], region)
            except EmptyRegionSignal:
                donor = None
            else:
                if donor != region:
                    corr = RegionCorrelation(region, corr.gamma, corr.index_a, corr.index_t, donor=donor)
                correlations.append(corr)
                colors = resample_region(corr, I_T, tau)
                provenance[region] = MATCHED if donor == region else fallback_label(donor)
        if donor is None:
            colors = source_flat[torch.from_numpy(index_a)].to(dtype)
            provenance[region] = COPIED
            logger.debug("Region %s has no usable target donor; copying source colors", region)

        out = out.index_copy(0, torch.from_numpy(index_a).to(out.device), colors.to(out.device))

    image = out.t().reshape(3, h, w)
    return HeadReference(image=image, provenance=provenance, correlations=correlations)


def build_head_reference(
    f_A: DenseFeatures,
    M_A: SegMap,
    f_T: DenseFeatures,
    M_T: SegMap,
    I_T: Image,
    tau: float,
    fallback: Mapping[str, str],
    source_image: Image,
    min_donor: Optional[int] = None,
) -> Tuple[Image, Provenance]:
    """
    Head color reference for the generated image from the target's colors.

    Args:
        f_A: Features of the generated image
        M_A: Segmentation of the generated image
        f_T: Features of the target image
        M_T: Segmentation of the target image
        I_T: Target colors; callers pass the target head only (I_T * M_T^H)
        tau: Softmax temperature
        fallback: Region -> donor region used when a region is missing in the target
        source_image: Generated image, whose colors are copied when no donor is usable
        min_donor: Smallest donor region accepted; defaults to the configured threshold
            scaled to the image area

    Returns:
        (reference image, provenance per A-side region)
    """
    for name, shape in (("M_A", M_A.shape), ("f_T", f_T.shape), ("M_T", M_T.shape), ("I_T", I_T.shape)):
        if shape != f_A.shape:
            raise InvalidArgumentError(f"{name} has shape {shape}, expected {f_A.shape}", name)
    if source_image.shape != f_A.shape:
        raise InvalidArgumentError("source_image shape does not match features", "source_image")
    if min_donor is None:
        min_donor = RefCreateConfig().min_donor_for(*f_A.shape)
    with torch.no_grad():
        ref = build_reference_tensor(
            DenseFeatures(f_A.data.detach()),
            region_masks(M_A),
            DenseFeatures(f_T.data.detach()),
            region_masks(M_T),
            I_T.to_tensor(f_A.data.dtype),
            tau,
            fallback,
            min_donor,
            source_image.to_tensor(f_A.data.dtype),
        )
    for region, source in sorted(ref.provenance.items()):
        if source != MATCHED:
            logger.info("Reference for region %s: %s", region, source)
    return ref.to_image(), ref.provenance


def hflip(images: torch.Tensor) -> torch.Tensor:
    return torch.flip(images, dims=[-1])


def color_jitter(images: torch.Tensor, policy: AugmentPolicy, generator: torch.Generator) -> torch.Tensor:
    """Random brightness, contrast and saturation shifts per image, clamped to [0, 1]."""
    b = images.shape[0]

    def draw(amount: float) -> torch.Tensor:
        u = torch.rand(b, 1, 1, 1, generator=generator).to(images.dtype)
        return (u * 2.0 - 1.0) * amount

    out = images + draw(policy.brightness)
    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    out = (out - mean) * (1.0 + draw(policy.contrast)) + mean
    gray = luma_tensor(out)
    out = gray + (out - gray) * (1.0 + draw(policy.saturation))
    return out.clamp(0.0, 1.0)


def flip_correspondence_accuracy(img: Image, seg: SegMap, params: FeaturePyramid) -> float:
    """
    Share of head pixels whose best match in the mirrored image is their mirror position.

    Tracks how well the features have learned correspondence; not a gate.
    """
    h, w = img.shape
    f_A = extract_features(img, params)
    f_T = extract_features(Image(img.data[:, ::-1]), params)
    regions_A = region_masks(seg)
    regions_T = region_masks(seg.flip_horizontal())
    hits = 0
    total = 0
    for region in regions_A.nonempty():
        corr = region_correlation(f_A, f_T, regions_A[region], regions_T[region], region)
        best = corr.index_t[corr.gamma.argmax(dim=1).numpy()]
        rows, cols = np.divmod(corr.index_a, w)
        expected = rows * w + (w - 1 - cols)
        hits += int(np.sum(best == expected))
        total += int(corr.index_a.size)
    return hits / total if total else 0.0
