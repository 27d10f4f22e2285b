"""
Evaluation metrics and the report they are collected into.

PSNR, SSIM, MS-SSIM and AKD are closed form. CSIM, the perceptual distance and the
Fréchet distance are computed on embeddings supplied by a FeatureProvider.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator
from scipy.linalg import sqrtm
from scipy.ndimage import gaussian_filter

from .exceptions import InvalidArgumentError
from .imagecore import Image, Mask
from .keypoints import KeypointSet
from .losses import feature_distance
from .providers import FeatureProvider

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11-tap window at sigma 1.5
SSIM_WINDOW = 11
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

FRECHET_EPS = 1e-6

METRIC_COLUMNS = ("CSIM", "LPIPS", "PSNR", "SSIM", "MS_SSIM", "AKD", "PSNR_inpainting", "PSNR_head")


def _check_pair(a: Image, b: Image) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"Image shapes differ: {a.shape} vs {b.shape}", "b")


def psnr(a: Image, b: Image, region: Optional[Mask] = None) -> float:
    """
    Peak signal-to-noise ratio in dB for images in [0, 1], optionally restricted to a region.

    A soft region weights each pixel's squared error by its mask value. Identical inputs
    (inside the region) give the 99 dB cap.

    Raises:
        InvalidArgumentError: On shape mismatch or an empty region
    """
    _check_pair(a, b)
    squared = (a.data - b.data) ** 2
    if region is None:
        mse = float(squared.mean())
    else:
        if region.shape != a.shape:
            raise InvalidArgumentError(f"Region has shape {region.shape}, expected {a.shape}", "region")
        if region.is_empty():
            raise InvalidArgumentError("PSNR region is empty", "region")
        weight = region.data[..., None]
        mse = float((weight * squared).sum() / (3.0 * region.data.sum()))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel (luminance, contrast-structure) maps of one channel."""
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    def blur(values: np.ndarray) -> np.ndarray:
        return gaussian_filter(values, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    mu_x = blur(x)
    mu_y = blur(y)
    mu_xy = mu_x * mu_y
    mu_sq = mu_x * mu_x + mu_y * mu_y
    sigma_sq = (blur(x * x) - mu_x * mu_x) + (blur(y * y) - mu_y * mu_y)
    sigma_xy = blur(x * y) - mu_xy
    luminance = (2.0 * mu_xy + c1) / (mu_sq + c1)
    contrast_structure = (2.0 * sigma_xy + c2) / (sigma_sq + c2)
    return luminance, contrast_structure


def _ssim_channels(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """Mean SSIM and mean contrast-structure over all channels of (H, W, C) arrays."""
    ssim_values: List[float] = []
    cs_values: List[float] = []
    for c in range(x.shape[2]):
        luminance, cs = _ssim_terms(x[..., c], y[..., c])
        ssim_values.append(float((luminance * cs).mean()))
        cs_values.append(float(cs.mean()))
    return float(np.mean(ssim_values)), float(np.mean(cs_values))


def ssim(a: Image, b: Image) -> float:
    """
    Structural similarity with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
    averaged over pixels and channels.

    Raises:
        InvalidArgumentError: On shape mismatch or images smaller than the window
    """
    _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidArgumentError(f"SSIM needs images of at least {SSIM_WINDOW}px, got {a.shape}", "a")
    return _ssim_channels(a.data, b.data)[0]


def ms_ssim_scales(height: int, width: int) -> int:
    """Number of scales whose coarsest image still holds the SSIM window, at most five."""
    scales = 0
    size = min(height, width)
    while scales < len(MS_SSIM_WEIGHTS) and size >= SSIM_WINDOW:
        scales += 1
        size //= 2
    return scales


def _downsample(data: np.ndarray) -> np.ndarray:
    h = data.shape[0] // 2 * 2
    w = data.shape[1] // 2 * 2
    d = data[:h, :w]
    return 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])


def ms_ssim(a: Image, b: Image) -> float:
    """
    Multi-scale SSIM in [0, 1].

    Images shorter than 176px use fewer scales; the weights of the used scales are
    renormalized to sum to one.

    Raises:
        InvalidArgumentError: On shape mismatch or images too small for a single scale
    """
    _check_pair(a, b)
    scales = ms_ssim_scales(*a.shape)
    if scales == 0:
        raise InvalidArgumentError(f"Image {a.shape} is too small for MS-SSIM", "a")
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    x, y = a.data, b.data
    result = 1.0
    for scale in range(scales):
        full, cs = _ssim_channels(x, y)
        if scale == scales - 1:
            result *= max(full, 0.0) ** weights[scale]
        else:
            result *= max(cs, 0.0) ** weights[scale]
            x, y = _downsample(x), _downsample(y)
    return float(min(1.0, result))


def akd(kps_gen: KeypointSet, kps_ref: KeypointSet) -> float:
    """
    Average keypoint distance: mean over corresponding keypoints of the coordinatewise L1
    distance, on keypoints normalized to the crop window.

    Raises:
        InvalidArgumentError: If the sets differ in keypoint count
    """
    if len(kps_gen) != len(kps_ref):
        raise InvalidArgumentError(f"Keypoint counts differ: {len(kps_gen)} vs {len(kps_ref)}", "kps_ref")
    return float(np.abs(kps_gen.points - kps_ref.points).sum(axis=1).mean())


def _embed(images: Sequence[Image], provider: FeatureProvider) -> np.ndarray:
    batch = torch.cat([img.to_tensor(torch.float64) for img in images], dim=0)
    with torch.no_grad():
        embedding = provider.embed(batch)
    return embedding.detach().to("cpu", torch.float64).numpy()


def embedding_metric(a: Image, b: Image, provider: FeatureProvider) -> float:
    """CSIM: cosine similarity between the provider embeddings of two images."""
    _check_pair(a, b)
    e = _embed([a, b], provider)
    norm = float(np.linalg.norm(e[0]) * np.linalg.norm(e[1]))
    if norm == 0.0:
        return 0.0
    return float(np.dot(e[0], e[1]) / norm)


def perceptual_distance(a: Image, b: Image, provider: FeatureProvider) -> float:
    """LPIPS-style distance: mean absolute difference of provider feature maps."""
    _check_pair(a, b)
    with torch.no_grad():
        return float(feature_distance(provider, a, b))


def frechet_distance_gaussians(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray, eps: float = FRECHET_EPS
) -> float:
    """
    Fréchet distance between N(mu1, cov1) and N(mu2, cov2).

    When the product of the covariances has no finite square root, eps * I is added to
    both covariances and the root is recomputed.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise InvalidArgumentError("Gaussian parameters have inconsistent shapes", "cov2")

    diff = mu1 - mu2
    covmean = sqrtm(cov1.dot(cov2))
    if not np.isfinite(covmean).all():
        logger.debug("Fréchet distance: singular product, adding %g to the diagonal", eps)
        offset = np.eye(cov1.shape[0]) * eps
        covmean = sqrtm((cov1 + offset).dot(cov2 + offset))
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    value = float(diff.dot(diff) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))
    return max(0.0, value)


def frechet_distance(emb_a: np.ndarray, emb_b: np.ndarray, eps: float = FRECHET_EPS) -> float:
    """
    Fréchet distance between Gaussians fitted to two (N, D) embedding sets.

    Raises:
        InvalidArgumentError: If either set has fewer than two samples
    """
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    for name, values in (("emb_a", a), ("emb_b", b)):
        if values.ndim != 2 or values.shape[0] < 2:
            raise InvalidArgumentError(f"{name} needs at least two (N, D) samples, got {values.shape}", name)
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError(f"Embedding dims differ: {a.shape[1]} vs {b.shape[1]}", "emb_b")
    return frechet_distance_gaussians(
        a.mean(axis=0), np.cov(a, rowvar=False), b.mean(axis=0), np.cov(b, rowvar=False), eps
    )


def distribution_metric(set_a: Sequence[Image], set_b: Sequence[Image], provider: FeatureProvider) -> float:
    """FID-style Fréchet distance between the provider embeddings of two image sets."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise InvalidArgumentError("Each image set needs at least two images", "set_a")
    return frechet_distance(_embed(set_a, provider), _embed(set_b, provider))


class MetricRow(BaseModel):
    """Metrics of one evaluated pair; None marks a metric whose provider failed."""

    split: str
    pair: int
    values: Dict[str, Optional[float]] = Field(default_factory=dict)

    @field_validator("values")
    @classmethod
    def check_finite_values(cls, values: Dict[str, Optional[float]]) -> Dict[str, Optional[float]]:
        for name, value in values.items():
            if value is not None and not math.isfinite(value):
                raise ValueError(f"metric {name} is not finite")
        return values


class MetricReport(BaseModel):
    """Per-pair rows, per-split distribution metrics and the providers that produced them."""

    rows: List[MetricRow] = Field(default_factory=list)
    distribution: Dict[str, Optional[float]] = Field(default_factory=dict)
    providers: Dict[str, str] = Field(default_factory=dict)
    keypoint_normalization: str = "crop"
    errors: List[str] = Field(default_factory=list)

    def splits(self) -> List[str]:
        return sorted({row.split for row in self.rows} | set(self.distribution))

    def aggregate(self) -> Dict[str, Dict[str, Dict[str, float]]]:
        """split -> column -> {mean, std, count} over the rows with a value."""
        summary: Dict[str, Dict[str, Dict[str, float]]] = {}
        for split in self.splits():
            columns: Dict[str, Dict[str, float]] = {}
            for column in METRIC_COLUMNS:
                values = [
                    v for row in self.rows if row.split == split for v in [row.values.get(column)] if v is not None
                ]
                if values:
                    columns[column] = {
                        "mean": float(np.mean(values)),
                        "std": float(np.std(values)),
                        "count": float(len(values)),
                    }
            fid = self.distribution.get(split)
            if fid is not None:
                columns["FID"] = {"mean": fid, "std": 0.0, "count": 1.0}
            summary[split] = columns
        return summary

    def write_csv(self, path: Union[str, Path]) -> Path:
        """One line per pair; columns follow METRIC_COLUMNS, empty cells for failed metrics."""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["split", "pair", *METRIC_COLUMNS])
            for row in self.rows:
                cells = [_cell(row.values.get(column)) for column in METRIC_COLUMNS]
                writer.writerow([row.split, row.pair, *cells])
        return target

    def summary(self) -> Dict[str, object]:
        return {
            "aggregate": self.aggregate(),
            "FID": dict(self.distribution),
            "providers": dict(self.providers),
            "keypoint_normalization": self.keypoint_normalization,
            "errors": list(self.errors),
        }

    def write_json(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return target


def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))
