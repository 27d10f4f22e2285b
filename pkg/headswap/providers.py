"""
Feature providers behind the perceptual, identity, emotion, gaze and keypoint terms.

Every provider is deterministic and frozen. The defaults are small seeded networks or
closed-form readouts tuned to the synthetic fixture; an external model plugs in by
subclassing FeatureProvider and registering it with the factory.
"""

import logging
import threading
from abc import ABC, abstractmethod
from copy import deepcopy
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InvalidArgumentError, ProviderError
from .imagecore import luma_tensor
from .keypoints import FIXTURE_PAIRS
from .layers import seeded

logger = logging.getLogger(__name__)

ROLES = ("perceptual", "identity", "emotion", "gaze", "keypoints")


class FeatureProvider(ABC):
    """Abstract base class for feature providers."""

    role = "abstract"
    name = "abstract"

    def __call__(self, images: torch.Tensor, anchors: Optional[torch.Tensor] = None) -> List[torch.Tensor]:
        """
        Compute feature maps for a batch of images.

        Args:
            images: (B, 3, H, W) tensor in [0, 1]
            anchors: Optional (B, K, 2) keypoints locating facial parts

        Returns:
            List of feature tensors, fixed shapes per provider

        Raises:
            ProviderError: If the provider fails
        """
        if images.dim() != 4 or images.shape[1] != 3:
            raise InvalidArgumentError(f"Expected (B, 3, H, W) images, got {tuple(images.shape)}", "images")
        try:
            return self.features(images, anchors)
        except (InvalidArgumentError, ProviderError):
            raise
        except Exception as e:
            raise ProviderError(f"Provider '{self.name}' failed: {str(e)}", self.name) from e

    @abstractmethod
    def features(self, images: torch.Tensor, anchors: Optional[torch.Tensor]) -> List[torch.Tensor]:
        pass

    def embed(self, images: torch.Tensor, anchors: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, D) embedding: spatially pooled last feature map."""
        maps = self(images, anchors)
        last = maps[-1]
        return last.flatten(2).mean(dim=2) if last.dim() == 4 else last.flatten(1)

    def is_available(self) -> bool:
        return True

    def describe(self) -> str:
        return f"{self.role}:{self.name}"


def _frozen(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class DtypeCache:
    """Per-dtype copies of a frozen module; the wrapped module itself is never cast."""

    def __init__(self, module: nn.Module) -> None:
        self.module = module
        self._copies: Dict[torch.dtype, nn.Module] = {}
        self._lock = threading.Lock()

    def get(self, dtype: torch.dtype) -> nn.Module:
        param = next(self.module.parameters(), None)
        if param is None or param.dtype == dtype:
            return self.module
        with self._lock:
            copy = self._copies.get(dtype)
            if copy is None:
                copy = _frozen(deepcopy(self.module).to(dtype))
                self._copies[dtype] = copy
        return copy


class ConvFeatureProvider(FeatureProvider):
    """Seeded, frozen conv stack standing in for a pretrained perceptual network."""

    role = "perceptual"
    name = "toy-conv"

    def __init__(self, channels: Sequence[int] = (16, 32, 64), seed: int = 1234) -> None:
        with seeded(seed):
            blocks = []
            in_channels = 3
            for out_channels in channels:
                blocks.append(
                    nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, 2, 1), nn.LeakyReLU(0.2))
                )
                in_channels = out_channels
            self.blocks = _frozen(nn.ModuleList(blocks))
        self._blocks = DtypeCache(self.blocks)

    def features(self, images: torch.Tensor, anchors: Optional[torch.Tensor]) -> List[torch.Tensor]:
        x = (images - 0.5) / 0.5
        maps: List[torch.Tensor] = []
        for block in self._blocks.get(images.dtype):
            x = block(x)
            maps.append(x)
        return maps


class ToyIdentityProvider(ConvFeatureProvider):
    """Frozen conv stack plus a linear head producing 512-d identity embeddings."""

    role = "identity"
    name = "toy-identity"

    def __init__(self, channels: Sequence[int] = (16, 32, 64), embedding_dim: int = 512, seed: int = 4321) -> None:
        super().__init__(channels, seed)
        with seeded(seed + 1):
            self.head = _frozen(nn.Linear(channels[-1], embedding_dim))
        self._head = DtypeCache(self.head)

    def embed(self, images: torch.Tensor, anchors: Optional[torch.Tensor] = None) -> torch.Tensor:
        pooled = self(images, anchors)[-1].mean(dim=(2, 3))
        return self._head.get(pooled.dtype)(pooled)


class ModuleIdentityProvider(FeatureProvider):
    """Wrap any image -> embedding module (for example a frozen external face embedder)."""

    role = "identity"

    def __init__(self, module: nn.Module, name: str = "module-identity") -> None:
        self.module = _frozen(module)
        self._module = DtypeCache(self.module)
        self.name = name

    def features(self, images: torch.Tensor, anchors: Optional[torch.Tensor]) -> List[torch.Tensor]:
        return [self.embed(images, anchors)[:, :, None, None]]

    def embed(self, images: torch.Tensor, anchors: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self._module.get(images.dtype)(images)


def _require_anchors(anchors: Optional[torch.Tensor], images: torch.Tensor, name: str) -> torch.Tensor:
    if anchors is None:
        raise InvalidArgumentError(f"Provider '{name}' needs keypoint anchors", "anchors")
    if anchors.dim() != 3 or anchors.shape[0] != images.shape[0] or anchors.shape[2] != 2:
        raise InvalidArgumentError(f"Anchors must have shape (B, K, 2), got {tuple(anchors.shape)}", "anchors")
    return anchors.to(images.dtype)


def _to_grid(points: torch.Tensor) -> torch.Tensor:
    # normalized [0, 1] coordinates -> grid_sample's [-1, 1] with align_corners=False
    return points * 2.0 - 1.0


def opening_readout(
    images: torch.Tensor,
    anchors: torch.Tensor,
    pairs: Sequence[Tuple[int, int]] = FIXTURE_PAIRS,
    window: float = 0.08,
    threshold: float = 0.3,
    temperature: float = 0.03,
    samples: int = 33,
) -> torch.Tensor:
    """
    Measure how far each eyelid / lip pair is open.

    A vertical strip centred between each pair's anchors is sampled; dark pixels inside
    the strip count towards the opening through a sigmoid, which keeps the measurement
    differentiable with respect to the image.

    Returns:
        (B, P) openings in normalized image units
    """
    gray = luma_tensor(images)
    b = images.shape[0]
    offsets = torch.linspace(-window, window, samples, dtype=images.dtype, device=images.device)
    columns = torch.tensor([-0.01, 0.0, 0.01], dtype=images.dtype, device=images.device)
    openings = []
    for lower, upper in pairs:
        mid = (anchors[:, lower] + anchors[:, upper]) / 2.0
        ys = mid[:, 1:2, None] + offsets[None, :, None].expand(b, samples, columns.numel())
        xs = mid[:, 0:1, None] + columns[None, None, :].expand(b, samples, columns.numel())
        grid = _to_grid(torch.stack([xs, ys], dim=-1))
        strip = F.grid_sample(gray, grid, mode="bilinear", padding_mode="border", align_corners=False)
        darkness = torch.sigmoid((threshold - strip) / temperature)
        openings.append(darkness.mean(dim=(1, 2, 3)) * 2.0 * window)
    return torch.stack(openings, dim=1)


class FixtureKeypointProvider(FeatureProvider):
    """Differentiable eyelid / lip keypoints read from fixture-style renders."""

    role = "keypoints"
    name = "fixture-keypoints"

    def __init__(self, pairs: Sequence[Tuple[int, int]] = FIXTURE_PAIRS) -> None:
        self.pairs = tuple(pairs)

    def features(self, images: torch.Tensor, anchors: Optional[torch.Tensor]) -> List[torch.Tensor]:
        return [self.keypoints(images, anchors)]

    def keypoints(self, images: torch.Tensor, anchors: Optional[torch.Tensor]) -> torch.Tensor:
        """
        Place each lower/upper pair symmetrically about its anchor midpoint, separated
        vertically by the measured opening. Unpaired anchors pass through unchanged.
        """
        anchors = _require_anchors(anchors, images, self.name)
        openings = opening_readout(images, anchors, self.pairs)
        points = anchors.detach().clone()
        for i, (lower, upper) in enumerate(self.pairs):
            mid = (anchors[:, lower] + anchors[:, upper]).detach() / 2.0
            half = openings[:, i] / 2.0
            zeros = torch.zeros_like(half)
            points[:, lower] = mid + torch.stack([zeros, half], dim=1)
            points[:, upper] = mid - torch.stack([zeros, half], dim=1)
        return points


class ExpressionReadoutProvider(FeatureProvider):
    """Expression features: the measured eye and mouth openings."""

    role = "emotion"
    name = "fixture-expression"

    def __init__(self, pairs: Sequence[Tuple[int, int]] = FIXTURE_PAIRS) -> None:
        self.pairs = tuple(pairs)

    def features(self, images: torch.Tensor, anchors: Optional[torch.Tensor]) -> List[torch.Tensor]:
        anchors = _require_anchors(anchors, images, self.name)
        return [opening_readout(images, anchors, self.pairs)[:, :, None, None]]


class EyePatchProvider(FeatureProvider):
    """Gaze features: small RGB patches sampled around each eye."""

    role = "gaze"
    name = "fixture-eye-patches"

    def __init__(
        self,
        eye_pairs: Sequence[Tuple[int, int]] = FIXTURE_PAIRS[:2],
        half_extent: float = 0.06,
        patch_size: int = 8,
    ) -> None:
        self.eye_pairs = tuple(eye_pairs)
        self.half_extent = half_extent
        self.patch_size = patch_size

    def features(self, images: torch.Tensor, anchors: Optional[torch.Tensor]) -> List[torch.Tensor]:
        anchors = _require_anchors(anchors, images, self.name)
        b = images.shape[0]
        steps = torch.linspace(
            -self.half_extent, self.half_extent, self.patch_size, dtype=images.dtype, device=images.device
        )
        gy, gx = torch.meshgrid(steps, steps, indexing="ij")
        patches = []
        for lower, upper in self.eye_pairs:
            center = ((anchors[:, lower] + anchors[:, upper]) / 2.0).detach()
            xs = center[:, 0, None, None] + gx[None].expand(b, -1, -1)
            ys = center[:, 1, None, None] + gy[None].expand(b, -1, -1)
            grid = _to_grid(torch.stack([xs, ys], dim=-1))
            patches.append(F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False))
        return patches


@dataclass
class ProviderSet:
    """The providers one training or evaluation run uses, keyed by role."""

    perceptual: FeatureProvider
    identity: FeatureProvider
    emotion: FeatureProvider
    gaze: FeatureProvider
    keypoints: FixtureKeypointProvider

    @classmethod
    def default(cls) -> "ProviderSet":
        return cls(
            perceptual=FeatureProviderFactory.create_provider("perceptual"),
            identity=FeatureProviderFactory.create_provider("identity"),
            emotion=FeatureProviderFactory.create_provider("emotion"),
            gaze=FeatureProviderFactory.create_provider("gaze"),
            keypoints=FixtureKeypointProvider(),
        )

    def describe(self) -> Dict[str, str]:
        return {role: getattr(self, role).describe() for role in ROLES}


class FeatureProviderFactory:
    """Factory for creating feature providers by role."""

    _registry: Dict[str, Callable[..., FeatureProvider]] = {
        "perceptual": ConvFeatureProvider,
        "identity": ToyIdentityProvider,
        "emotion": ExpressionReadoutProvider,
        "gaze": EyePatchProvider,
        "keypoints": FixtureKeypointProvider,
    }

    @classmethod
    def register(cls, role: str, constructor: Callable[..., FeatureProvider]) -> None:
        if role not in ROLES:
            raise InvalidArgumentError(f"Unknown provider role '{role}'", "role")
        cls._registry[role] = constructor

    @classmethod
    def create_provider(cls, role: str, options: Optional[Dict[str, Any]] = None) -> FeatureProvider:
        """
        Create a provider for a role.

        Args:
            role: One of perceptual, identity, emotion, gaze, keypoints
            options: Keyword arguments forwarded to the provider constructor

        Returns:
            FeatureProvider instance

        Raises:
            ProviderError: If the role is unknown or construction fails
        """
        constructor = cls._registry.get(role)
        if constructor is None:
            raise ProviderError(f"Unsupported provider role: {role}", role)
        try:
            provider = constructor(**(options or {}))
        except TypeError as e:
            raise ProviderError(f"Invalid options for {role} provider: {str(e)}", role) from e
        logger.debug("Created %s provider %s", role, provider.name)
        return provider
