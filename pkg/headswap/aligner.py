"""
Head reenactment network: identity, portrait and motion encoders, a spectrally normalized
fusion MLP and an AdaIN generator that grows the reenacted head and its mask from a
learnable 512x4x4 seed.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AlignerConfig
from .exceptions import InvalidArgumentError
from .imagecore import Image, Mask, CropSpec, crop, resize
from .layers import (
    AdaptiveInstanceNorm2d,
    MultiScaleDiscriminator,
    adain_param_count,
    check_finite,
    seeded,
    sn_linear,
)

logger = logging.getLogger(__name__)

ID_DIM = 512
POR_DIM = 512
MOTION_DIM = 256
COND_DIM = ID_DIM + POR_DIM + MOTION_DIM
SEED_SHAPE = (512, 4, 4)


@dataclass(frozen=True)
class EmbeddingBundle:
    """Batched f_id (B, 512), f_por (B, 512) and f_mtn (B, 256)."""

    f_id: torch.Tensor
    f_por: torch.Tensor
    f_mtn: torch.Tensor

    def __post_init__(self) -> None:
        for name, tensor, dim in (("f_id", self.f_id, ID_DIM), ("f_por", self.f_por, POR_DIM), ("f_mtn", self.f_mtn, MOTION_DIM)):
            if tensor.dim() != 2 or tensor.shape[1] != dim:
                raise InvalidArgumentError(f"{name} must have shape (B, {dim}), got {tuple(tensor.shape)}", name)
            if not bool(torch.isfinite(tensor).all()):
                raise InvalidArgumentError(f"{name} contains non-finite values", name)
        if not self.f_id.shape[0] == self.f_por.shape[0] == self.f_mtn.shape[0]:
            raise InvalidArgumentError("Embedding batch sizes differ", "bundle")

    def concat(self) -> torch.Tensor:
        return torch.cat([self.f_id, self.f_por, self.f_mtn], dim=1)

    @classmethod
    def zeros(cls, batch: int = 1) -> "EmbeddingBundle":
        return cls(torch.zeros(batch, ID_DIM), torch.zeros(batch, POR_DIM), torch.zeros(batch, MOTION_DIM))


@dataclass(frozen=True)
class AlignerTensors:
    """Raw generator output: image (B, 3, H, W) and soft mask (B, 1, H, W)."""

    image: torch.Tensor
    mask: torch.Tensor


@dataclass(frozen=True)
class AlignerOutput:
    """Reenacted head and its soft mask for a single sample."""

    image: Image
    mask: Mask

    def hard_mask(self) -> Mask:
        return Mask.from_bool(self.mask.data > 0.5)


class ConvEncoder(nn.Module):
    """Strided conv stack, global average pool and a linear projection."""

    def __init__(self, channels: List[int], out_dim: int) -> None:
        super().__init__()
        layers: List[nn.Module] = []
        in_channels = 3
        for c in channels:
            layers += [nn.Conv2d(in_channels, c, 4, 2, 1), nn.LeakyReLU(0.2)]
            in_channels = c
        self.features = nn.Sequential(*layers)
        self.project = nn.Linear(in_channels, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x * 2.0 - 1.0)
        return self.project(x.mean(dim=(2, 3)))


class FusionMLP(nn.Module):
    """Two spectrally normalized affine + ReLU layers that keep the 1280-d width."""

    def __init__(self, dim: int = COND_DIM) -> None:
        super().__init__()
        self.fc1 = sn_linear(dim, dim)
        self.fc2 = sn_linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.fc2(F.relu(self.fc1(x))))


class AdaINUpBlock(nn.Module):
    """Residual 2x upsampling block with AdaIN before each convolution."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.norm1 = AdaptiveInstanceNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, 1, 1)
        self.norm2 = AdaptiveInstanceNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1)
        self.style_dim = 2 * (in_channels + out_channels)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        split = 2 * self.norm1.num_features
        up = F.interpolate(x, scale_factor=2, mode="nearest")
        h = F.interpolate(F.relu(self.norm1(x, style[:, :split])), scale_factor=2, mode="nearest")
        h = self.conv2(F.relu(self.norm2(self.conv1(h), style[:, split:])))
        return h + self.skip(up)


class Generator(nn.Module):
    """AdaIN generator starting from a learnable seed tensor; every block is conditioned."""

    def __init__(self, channels: List[int], cond_dim: int = COND_DIM) -> None:
        super().__init__()
        self.seed = nn.Parameter(torch.randn(*SEED_SHAPE))
        widths = [SEED_SHAPE[0]] + list(channels)
        self.blocks = nn.ModuleList(AdaINUpBlock(widths[i], widths[i + 1]) for i in range(len(channels)))
        self.out_norm = AdaptiveInstanceNorm2d(widths[-1])
        self.out_conv = nn.Conv2d(widths[-1], 4, 3, 1, 1)
        self.style = nn.Linear(cond_dim, adain_param_count(self))
        nn.init.normal_(self.style.weight, 0.0, 0.01)
        nn.init.zeros_(self.style.bias)

    def forward(self, cond: torch.Tensor) -> AlignerTensors:
        styles = self.style(cond)
        x = self.seed.unsqueeze(0).expand(cond.shape[0], -1, -1, -1)
        offset = 0
        for i, block in enumerate(self.blocks):
            x = check_finite(block(x, styles[:, offset : offset + block.style_dim]), f"generator.blocks.{i}")
            offset += block.style_dim
        out = check_finite(self.out_conv(F.relu(self.out_norm(x, styles[:, offset:]))), "generator.out_conv")
        return AlignerTensors(image=torch.sigmoid(out[:, :3]), mask=torch.sigmoid(out[:, 3:4]))


class Aligner(nn.Module):
    """All reenactment parameters: encoders, fusion, generator and discriminator."""

    def __init__(self, config: Optional[AlignerConfig] = None) -> None:
        super().__init__()
        self.config = config or AlignerConfig()
        with seeded(self.config.seed):
            enc = self.config.encoder_channels()
            self.e_id = ConvEncoder(enc, ID_DIM)
            self.e_por = ConvEncoder(enc, POR_DIM)
            # lightweight motion encoder: half the width
            self.e_motion = ConvEncoder([max(8, c // 2) for c in enc], MOTION_DIM)
            self.fusion = FusionMLP()
            self.generator = Generator(self.config.generator_channels())
            self.discriminator = MultiScaleDiscriminator(
                3, self.config.disc_base_channels, self.config.disc_layers, self.config.disc_scales
            )
        if self.config.freeze_identity:
            self.e_id.requires_grad_(False)

    GENERATOR_GROUPS = ("e_id", "e_por", "e_motion", "fusion", "generator")

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        for group in self.GENERATOR_GROUPS:
            for p in getattr(self, group).parameters():
                if p.requires_grad:
                    yield p

    def discriminator_parameters(self) -> Iterator[nn.Parameter]:
        return self.discriminator.parameters()

    def group_grad_norms(self) -> Dict[str, float]:
        norms: Dict[str, float] = {}
        for group in self.GENERATOR_GROUPS + ("discriminator",):
            grads = [p.grad.detach().flatten() for p in getattr(self, group).parameters() if p.grad is not None]
            norms[group] = float(torch.cat(grads).norm()) if grads else 0.0
        return norms

    def _check_resolution(self, x: torch.Tensor, size: int, name: str) -> None:
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise InvalidArgumentError(
                f"{name} must have shape (B, 3, {size}, {size}), got {tuple(x.shape)}", name
            )

    def encode(self, source: torch.Tensor, face_crop: torch.Tensor, target_aug: torch.Tensor) -> EmbeddingBundle:
        res = self.config.resolution
        self._check_resolution(source, res, "source")
        self._check_resolution(target_aug, res, "target_aug")
        self._check_resolution(face_crop, self.config.crop_size, "face_crop")
        return EmbeddingBundle(
            f_id=check_finite(self.e_id(face_crop), "e_id"),
            f_por=check_finite(self.e_por(source), "e_por"),
            f_mtn=check_finite(self.e_motion(target_aug), "e_motion"),
        )

    def fuse(self, bundle: EmbeddingBundle) -> torch.Tensor:
        return check_finite(self.fusion(bundle.concat()), "fusion")

    def generate(self, cond: torch.Tensor) -> AlignerTensors:
        if cond.dim() != 2 or cond.shape[1] != COND_DIM:
            raise InvalidArgumentError(f"Conditioning must have shape (B, {COND_DIM})", "cond")
        return self.generator(cond)

    def face_crop(self, source: torch.Tensor) -> torch.Tensor:
        """Central face window of a (B, 3, H, W) batch resized to the crop size."""
        h, w = source.shape[2], source.shape[3]
        top, left, ch, cw = CropSpec.central(h, w, self.config.face_crop_fraction).window(h, w)
        window = source[:, :, top : top + ch, left : left + cw]
        size = self.config.crop_size
        if (ch, cw) == (size, size):
            return window
        return F.interpolate(window, size=(size, size), mode="bilinear", align_corners=False).clamp(0.0, 1.0)

    def forward(self, source: torch.Tensor, target_aug: torch.Tensor) -> AlignerTensors:
        bundle = self.encode(source, self.face_crop(source), target_aug)
        return self.generate(self.fuse(bundle))


def stretch_tensor(images: torch.Tensor, sx: torch.Tensor, sy: torch.Tensor) -> torch.Tensor:
    """Scale content of each image anisotropically about its centre, keeping the size."""
    b = images.shape[0]
    theta = torch.zeros(b, 2, 3, dtype=images.dtype, device=images.device)
    theta[:, 0, 0] = 1.0 / sx.to(images.dtype)
    theta[:, 1, 1] = 1.0 / sy.to(images.dtype)
    grid = F.affine_grid(theta, list(images.shape), align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)


def stretch_augment(img: Image, sx: float, sy: float, ratio_range: Tuple[float, float] = (0.75, 1.25)) -> Image:
    low, high = ratio_range
    for name, ratio in (("sx", sx), ("sy", sy)):
        if not low <= ratio <= high:
            raise InvalidArgumentError(f"{name}={ratio} outside stretch range [{low}, {high}]", name)
    tensor = img.to_tensor(torch.float64)
    out = stretch_tensor(tensor, torch.tensor([sx], dtype=torch.float64), torch.tensor([sy], dtype=torch.float64))
    return Image.from_tensor(out.clamp(0.0, 1.0))


def sample_stretch(batch: int, ratio_range: Tuple[float, float], generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    low, high = ratio_range
    sx = low + (high - low) * torch.rand(batch, generator=generator)
    sy = low + (high - low) * torch.rand(batch, generator=generator)
    return sx, sy


def make_face_crop(source: Image, config: AlignerConfig) -> Image:
    spec = CropSpec.central(source.height, source.width, config.face_crop_fraction, semantic="face")
    size = config.crop_size
    return resize(crop(source, spec), size, size)


def _batch(img: Image) -> torch.Tensor:
    return img.to_tensor(torch.float32)


def encode(source: Image, face_crop: Image, target_aug: Image, params: Aligner) -> EmbeddingBundle:
    """
    Embed the source appearance and the target motion.

    Args:
        source: Source head at the configured resolution
        face_crop: Face window of the source at the configured crop size
        target_aug: Target head (stretched during training)
        params: Aligner parameters

    Returns:
        EmbeddingBundle for a batch of one

    Raises:
        InvalidArgumentError: If any image has the wrong resolution
    """
    params.eval()
    with torch.no_grad():
        return params.encode(_batch(source), _batch(face_crop), _batch(target_aug))


def fuse(bundle: EmbeddingBundle, params: Aligner) -> torch.Tensor:
    params.eval()
    with torch.no_grad():
        return params.fuse(bundle)


def generate(cond: torch.Tensor, params: Aligner) -> AlignerOutput:
    params.eval()
    with torch.no_grad():
        out = params.generate(cond)
    if out.image.shape[0] != 1:
        raise InvalidArgumentError("generate expects a single conditioning vector", "cond")
    return AlignerOutput(image=Image.from_tensor(out.image), mask=Mask.from_tensor(out.mask))


def reenact(source: Image, target: Image, params: Aligner) -> AlignerOutput:
    """Reenact the source head with the target's pose and expression; no stretch at inference."""
    bundle = encode(source, make_face_crop(source, params.config), target, params)
    return generate(fuse(bundle, params), params)
