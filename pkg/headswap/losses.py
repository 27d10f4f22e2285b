"""
Training objectives of both stages.

Every function accepts tensors (and, for convenience, Image / Mask values) and returns a
scalar tensor so the same code serves training, the float64 gradient checks and tests.
"""

import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .config import AlignerLossWeights, BlenderLossWeights
from .exceptions import InvalidArgumentError
from .imagecore import Image, Mask, luma_tensor
from .keypoints import FIXTURE_PAIRS, KeypointSet
from .logs import ALIGNER_TERMS, BLENDER_TERMS
from .providers import FeatureProvider
from .refcreate import RegionCorrelation, resample_back

logger = logging.getLogger(__name__)

DICE_EPS = 1e-6

TensorLike = Union[torch.Tensor, Image, Mask]
Scores = Union[torch.Tensor, Sequence[torch.Tensor]]

# loss-log term name -> weight attribute
ALIGNER_WEIGHT_NAMES: Dict[str, str] = {term: f"lambda_{term}" for term in ALIGNER_TERMS}
BLENDER_WEIGHT_NAMES: Dict[str, str] = {
    "adv": "lambda_adv",
    "l1": "lambda_l1",
    "perc_vgg": "lambda_perc_vgg",
    "cycle": "lambda_c",
    "cycle_prime": "lambda_c",
    "reg": "lambda_reg",
}


def as_tensor(value: TensorLike, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    if isinstance(value, (Image, Mask)):
        return value.to_tensor(dtype)
    return value


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"Shape mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}", what)


def keypoint_gaps(points: torch.Tensor, pairs: Sequence[Tuple[int, int]] = FIXTURE_PAIRS) -> torch.Tensor:
    """(B, K, 2) keypoints -> (B, P) L1 gaps between each lower point and its upper partner."""
    lower = points[:, [a for a, _ in pairs]]
    upper = points[:, [b for _, b in pairs]]
    return (lower - upper).abs().sum(dim=2)


def keypoint_closure_tensor(
    gen: torch.Tensor, drv: torch.Tensor, pairs: Sequence[Tuple[int, int]] = FIXTURE_PAIRS
) -> torch.Tensor:
    """Sum over pairs of |gap_gen - gap_drv|, averaged over the batch."""
    _check_shapes(gen, drv, "keypoint_closure")
    return (keypoint_gaps(gen, pairs) - keypoint_gaps(drv, pairs)).abs().sum(dim=1).mean()


def keypoint_closure_loss(gen: KeypointSet, drv: KeypointSet) -> torch.Tensor:
    """
    Penalize lip and eyelid openings of the generated head that differ from the driving head.

    Raises:
        InvalidArgumentError: If the two sets do not share their pair structure
    """
    if not gen.same_structure(drv):
        raise InvalidArgumentError("Keypoint sets have different pair structure", "keypoints")
    return keypoint_closure_tensor(gen.to_tensor(torch.float64), drv.to_tensor(torch.float64), gen.pairs)


def dice_loss(pred: TensorLike, gt: TensorLike, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2|p.g| + eps) / (|p| + |g| + eps) per sample, averaged over the batch."""
    p = as_tensor(pred)
    g = as_tensor(gt).to(p.dtype)
    _check_shapes(p, g, "dice_loss")
    p = p.flatten(1)
    g = g.flatten(1)
    intersection = (p * g).sum(dim=1)
    total = p.sum(dim=1) + g.sum(dim=1)
    return (1.0 - (2.0 * intersection + eps) / (total + eps)).mean()


def _as_list(scores: Scores) -> List[torch.Tensor]:
    return [scores] if isinstance(scores, torch.Tensor) else list(scores)


def hinge_adv_loss(real_scores: Optional[Scores], fake_scores: Scores, side: str) -> torch.Tensor:
    """
    Hinge adversarial loss, averaged over discriminator scales.

    D side: mean(relu(1 - real)) + mean(relu(1 + fake)); G side: -mean(fake).
    """
    fakes = _as_list(fake_scores)
    if side == "G":
        return torch.stack([-f.mean() for f in fakes]).mean()
    if side != "D":
        raise InvalidArgumentError(f"side must be 'G' or 'D', got '{side}'", "side")
    if real_scores is None:
        raise InvalidArgumentError("Discriminator hinge loss needs real scores", "real_scores")
    reals = _as_list(real_scores)
    if len(reals) != len(fakes):
        raise InvalidArgumentError("Real and fake score lists differ in length", "real_scores")
    terms = [F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean() for r, f in zip(reals, fakes)]
    return torch.stack(terms).mean()


def feature_matching_loss(real_feats: Sequence[torch.Tensor], fake_feats: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean L1 between discriminator feature maps; real maps are treated as constants."""
    if len(real_feats) != len(fake_feats) or not real_feats:
        raise InvalidArgumentError("Feature lists must be non-empty and of equal length", "feats")
    return torch.stack([(f - r.detach()).abs().mean() for r, f in zip(real_feats, fake_feats)]).mean()


def l1_loss(a: TensorLike, b: TensorLike) -> torch.Tensor:
    x = as_tensor(a)
    y = as_tensor(b).to(x.dtype)
    _check_shapes(x, y, "l1_loss")
    return (x - y).abs().mean()


def feature_distance(
    provider: FeatureProvider, a: TensorLike, b: TensorLike, anchors: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Mean over provider layers of the mean absolute difference between feature maps."""
    x = as_tensor(a)
    y = as_tensor(b).to(x.dtype)
    _check_shapes(x, y, "feature_distance")
    maps_a = provider(x, anchors)
    maps_b = provider(y, anchors)
    return torch.stack([(fa - fb).abs().mean() for fa, fb in zip(maps_a, maps_b)]).mean()


def cosine_distance(e_a: torch.Tensor, e_b: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity of (B, D) embeddings, averaged over the batch."""
    _check_shapes(e_a, e_b, "cosine_distance")
    return (1.0 - F.cosine_similarity(e_a, e_b, dim=1, eps=1e-8)).mean()


def reconstruction_losses(gen: TensorLike, gt: TensorLike, provider: FeatureProvider) -> Tuple[torch.Tensor, torch.Tensor]:
    """(L1, perceptual) between a generated image and its ground truth."""
    return l1_loss(gen, gt), feature_distance(provider, gen, gt)


def id_losses(gen: TensorLike, src: TensorLike, id_provider: FeatureProvider) -> Tuple[torch.Tensor, torch.Tensor]:
    """(cosine, perceptual) identity losses between the generated head and the source."""
    x = as_tensor(gen)
    y = as_tensor(src).to(x.dtype)
    _check_shapes(x, y, "id_losses")
    cosine = cosine_distance(id_provider.embed(x), id_provider.embed(y))
    return cosine, feature_distance(id_provider, x, y)


def emotion_loss(gen: torch.Tensor, drv: torch.Tensor, provider: FeatureProvider, anchors: torch.Tensor) -> torch.Tensor:
    return feature_distance(provider, gen, drv, anchors)


def gaze_loss(gen: torch.Tensor, drv: torch.Tensor, provider: FeatureProvider, anchors: torch.Tensor) -> torch.Tensor:
    return feature_distance(provider, gen, drv, anchors)


def _flat(image: torch.Tensor) -> torch.Tensor:
    tensor = image[0] if image.dim() == 4 else image
    return tensor.reshape(3, -1).t()


def cycle_loss(
    correlations: Sequence[RegionCorrelation],
    I_T: TensorLike,
    I_TA: TensorLike,
    tau: float,
) -> torch.Tensor:
    """
    Map the reference back onto the target geometry and compare with the target.

    For each region, every T pixel takes a softmax (over A pixels) weighted mix of the
    reference colors, using the transposed correlation. The result is the mean absolute
    difference over all T-side region pixels and channels; with no regions it is 0.

    Args:
        correlations: Correlations that produced the reference
        I_T: Image the cycled colors are compared with, (3, H, W) or (1, 3, H, W)
        I_TA: Head reference in A geometry
        tau: Softmax temperature
    """
    target = _flat(as_tensor(I_T))
    reference = as_tensor(I_TA)
    total = target.new_zeros(())
    count = 0
    for corr in correlations:
        cycled = resample_back(corr, reference, tau)
        expected = target[torch.from_numpy(corr.index_t)].to(cycled.dtype)
        total = total + (cycled - expected).abs().sum()
        count += int(corr.index_t.size) * 3
    if count == 0:
        return total
    return total / count


def gray_reg_loss(I_A: TensorLike, I_HR: TensorLike, M_A_H: TensorLike) -> torch.Tensor:
    """Mean over pixels of |M * (gray(I_A) - gray(I_HR))|."""
    a = as_tensor(I_A)
    ref = as_tensor(I_HR).to(a.dtype)
    mask = as_tensor(M_A_H).to(a.dtype)
    _check_shapes(a, ref, "gray_reg_loss")
    if a.dim() == 3:
        a, ref = a.unsqueeze(0), ref.unsqueeze(0)
    if mask.dim() == 3:
        mask = mask.unsqueeze(0)
    diff = mask * (luma_tensor(a) - luma_tensor(ref))
    return diff.abs().mean()


def _weighted_total(
    terms: Mapping[str, Union[torch.Tensor, float]],
    weights: Union[AlignerLossWeights, BlenderLossWeights],
    names: Dict[str, str],
    required: Sequence[str],
    optional: Sequence[str],
) -> Union[torch.Tensor, float]:
    missing = [name for name in required if name not in terms]
    if missing:
        raise InvalidArgumentError(f"Missing loss terms: {', '.join(missing)}", missing[0])
    unknown = sorted(set(terms) - set(names))
    if unknown:
        raise InvalidArgumentError(f"Unknown loss terms: {', '.join(unknown)}", unknown[0])
    total: Union[torch.Tensor, float] = 0.0
    for name in list(required) + [n for n in optional if n in terms]:
        total = total + getattr(weights, names[name]) * terms[name]
    return total


def total_aligner_loss(
    terms: Mapping[str, Union[torch.Tensor, float]],
    weights: Optional[AlignerLossWeights] = None,
    gaze_active: bool = True,
) -> Union[torch.Tensor, float]:
    """
    Weighted aligner objective.

    Args:
        terms: Term name (adv, fm, l1, perc_vgg, perc_id, cos_id, dice, emo, kpt, gaze) -> value
        weights: Loss weights; defaults to the standard weights
        gaze_active: Whether the gaze term is scheduled in; when inactive it is ignored

    Raises:
        InvalidArgumentError: If a mandatory term is missing
    """
    required = [t for t in ALIGNER_TERMS if t != "gaze" or gaze_active]
    return _weighted_total(terms, weights or AlignerLossWeights(), ALIGNER_WEIGHT_NAMES, required, [])


def total_blender_loss(
    terms: Mapping[str, Union[torch.Tensor, float]],
    weights: Optional[BlenderLossWeights] = None,
) -> Union[torch.Tensor, float]:
    """
    Weighted blender objective; cycle_prime is optional and shares the cycle weight.

    Raises:
        InvalidArgumentError: If a mandatory term is missing
    """
    required = [t for t in BLENDER_TERMS if t != "cycle_prime"]
    return _weighted_total(terms, weights or BlenderLossWeights(), BLENDER_WEIGHT_NAMES, required, ["cycle_prime"])


def term_values(terms: Mapping[str, Union[torch.Tensor, float]]) -> Dict[str, float]:
    """Plain floats for logging."""
    return {name: float(value.detach()) if isinstance(value, torch.Tensor) else float(value) for name, value in terms.items()}
