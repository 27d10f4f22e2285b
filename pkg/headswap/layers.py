"""
Network building blocks shared by both stages: AdaIN plumbing, spectrally normalized
discriminators, seeding and finiteness guards.
"""

from contextlib import contextmanager
from typing import Iterator, List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import NumericFailureError


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def check_finite(tensor: torch.Tensor, layer: str) -> torch.Tensor:
    if not bool(torch.isfinite(tensor).all()):
        raise NumericFailureError(f"Non-finite activations after layer '{layer}'", layer=layer)
    return tensor


def adain(x: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalize each channel of x over its spatial extent, then apply per-sample scale and bias."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    normalized = (x - mean) / torch.sqrt(var + eps)
    return normalized * scale[:, :, None, None] + bias[:, :, None, None]


class AdaptiveInstanceNorm2d(nn.Module):
    """AdaIN layer driven by a per-sample style vector of width 2C (scale deviation, then bias)."""

    def __init__(self, num_features: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.num_features = num_features
        self.eps = eps

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        c = self.num_features
        return adain(x, 1.0 + style[:, :c], style[:, c : 2 * c], self.eps)

    def extra_repr(self) -> str:
        return f"{self.num_features}, eps={self.eps}"


def adain_param_count(model: nn.Module) -> int:
    return sum(2 * m.num_features for m in model.modules() if isinstance(m, AdaptiveInstanceNorm2d))


def sn_conv(in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0) -> nn.Module:
    return nn.utils.spectral_norm(nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding))


def sn_linear(in_features: int, out_features: int) -> nn.Module:
    return nn.utils.spectral_norm(nn.Linear(in_features, out_features))


class PatchDiscriminator(nn.Module):
    """Spectrally normalized patch discriminator that also returns its intermediate maps."""

    def __init__(self, in_channels: int = 3, base_channels: int = 32, n_layers: int = 3) -> None:
        super().__init__()
        layers: List[nn.Module] = []
        channels = in_channels
        for i in range(n_layers):
            out_channels = base_channels * min(2**i, 8)
            layers.append(nn.Sequential(sn_conv(channels, out_channels, 4, 2, 1), nn.LeakyReLU(0.2)))
            channels = out_channels
        self.blocks = nn.ModuleList(layers)
        self.head = sn_conv(channels, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        features: List[torch.Tensor] = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        return self.head(x), features


class MultiScaleDiscriminator(nn.Module):
    """Patch discriminators applied to the input and to 2x average-pooled copies."""

    def __init__(self, in_channels: int = 3, base_channels: int = 32, n_layers: int = 3, num_scales: int = 2) -> None:
        super().__init__()
        self.discriminators = nn.ModuleList(
            PatchDiscriminator(in_channels, base_channels, n_layers) for _ in range(num_scales)
        )

    def forward(self, x: torch.Tensor) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        scores: List[torch.Tensor] = []
        features: List[torch.Tensor] = []
        for i, disc in enumerate(self.discriminators):
            if i > 0:
                x = F.avg_pool2d(x, kernel_size=3, stride=2, padding=1, count_include_pad=False)
            score, feats = disc(x)
            scores.append(score)
            features.extend(feats)
        return scores, features
