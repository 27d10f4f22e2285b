"""
Synthetic head fixture: parametric heads rendered together with their exact segmentation,
keypoints and soft portrait mask, plus dataset generation and directory I/O.

Geometry is defined in a head-local frame (x to the right, y down, units of the image
side) and mapped to the image by the motion parameters: rotation about the head centre,
translation and uniform scale.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from .exceptions import InvalidArgumentError
from .imagecore import Image, Mask, feather, load_image, load_mask, quantize, save_image, save_mask
from .keypoints import FIXTURE_KEYPOINT_NAMES, KeypointSet
from .segmentation import (
    RegistrySegmenter,
    SegClass,
    SegMap,
    default_registry,
    head_mask,
    load_segmap,
    save_segmap,
    taxonomy_manifest,
)

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
SOFT_MASK_SIGMA = 2.0

Color = Tuple[float, float, float]

# head-local layout constants
EYE_Y = -0.05
EYE_MAX_HALF_HEIGHT = 0.03
BROW_Y = -0.16
MOUTH_Y = 0.15
MOUTH_MAX_HALF_HEIGHT = 0.03
NOSE_TIP_Y = 0.09
BEARD_TOP_Y = 0.24
EAR_Y = -0.02

MOUTH_COLOR: Color = (0.1, 0.03, 0.03)
TEETH_COLOR: Color = (0.95, 0.95, 0.9)
EARRING_COLOR: Color = (0.9, 0.8, 0.2)


class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class IdentityParams(_Params):
    """Everything that stays fixed for one person."""

    head_axes: Tuple[float, float] = (0.2, 0.3)
    skin_color: Color = (0.85, 0.65, 0.55)
    hair_color: Color = (0.3, 0.2, 0.1)
    lip_color: Color = (0.75, 0.3, 0.3)
    eye_color: Color = (0.05, 0.05, 0.08)
    background_color: Color = (0.4, 0.6, 0.8)
    hat_color: Color = (0.2, 0.3, 0.7)
    accessory_color: Color = (0.15, 0.15, 0.15)
    hair_extent: float = Field(0.5, ge=0.0, le=1.0)
    beard: bool = False
    hat: bool = False
    glasses: bool = False
    earrings: bool = False
    headphones: bool = False


class MotionParams(_Params):
    """Pose and expression of one frame."""

    rotation: float = Field(0.0, ge=-15.0, le=15.0)
    translation: Tuple[float, float] = (0.0, 0.0)
    scale: float = Field(1.0, ge=0.9, le=1.1)
    eye_openness: float = Field(1.0, ge=0.0, le=1.0)
    mouth_openness: float = Field(0.0, ge=0.0, le=1.0)


class SyntheticHeadSpec(_Params):
    identity: IdentityParams = Field(default_factory=IdentityParams)
    motion: MotionParams = Field(default_factory=MotionParams)
    resolution: int = Field(64, ge=16)

    def with_motion(self, motion: MotionParams) -> "SyntheticHeadSpec":
        return SyntheticHeadSpec(identity=self.identity, motion=motion, resolution=self.resolution)


def _color(rng: np.random.Generator, low: Sequence[float], high: Sequence[float]) -> Color:
    values = rng.uniform(low, high)
    return (float(values[0]), float(values[1]), float(values[2]))


def sample_identity(rng: np.random.Generator) -> IdentityParams:
    return IdentityParams(
        head_axes=(float(rng.uniform(0.17, 0.22)), float(rng.uniform(0.28, 0.32))),
        skin_color=_color(rng, (0.6, 0.45, 0.35), (0.95, 0.8, 0.7)),
        hair_color=_color(rng, (0.05, 0.05, 0.05), (0.9, 0.8, 0.7)),
        lip_color=_color(rng, (0.6, 0.25, 0.25), (0.9, 0.4, 0.45)),
        eye_color=_color(rng, (0.02, 0.02, 0.02), (0.12, 0.12, 0.12)),
        background_color=_color(rng, (0.2, 0.2, 0.2), (0.9, 0.9, 0.9)),
        hat_color=_color(rng, (0.1, 0.1, 0.1), (0.9, 0.9, 0.9)),
        accessory_color=_color(rng, (0.05, 0.05, 0.05), (0.4, 0.4, 0.4)),
        hair_extent=float(rng.uniform(0.0, 1.0)) if rng.uniform() > 0.15 else 0.0,
        beard=bool(rng.uniform() < 0.25),
        hat=bool(rng.uniform() < 0.15),
        glasses=bool(rng.uniform() < 0.2),
        earrings=bool(rng.uniform() < 0.15),
        headphones=bool(rng.uniform() < 0.1),
    )


def sample_motion(rng: np.random.Generator) -> MotionParams:
    return MotionParams(
        rotation=float(rng.uniform(-15.0, 15.0)),
        translation=(float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))),
        scale=float(rng.uniform(0.9, 1.1)),
        eye_openness=float(rng.uniform(0.0, 1.0)) if rng.uniform() > 0.1 else 0.0,
        mouth_openness=float(rng.uniform(0.0, 1.0)) if rng.uniform() > 0.3 else 0.0,
    )


def _local_grid(spec: SyntheticHeadSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Head-local coordinates of every pixel centre."""
    n = spec.resolution
    motion = spec.motion
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n
    y, x = np.meshgrid(coords, coords, indexing="ij")
    dx = x - (0.5 + motion.translation[0])
    dy = y - (0.5 + motion.translation[1])
    theta = math.radians(motion.rotation)
    c, s = math.cos(theta), math.sin(theta)
    qx = (c * dx + s * dy) / motion.scale
    qy = (-s * dx + c * dy) / motion.scale
    return qx, qy


def _to_image(spec: SyntheticHeadSpec, qx: float, qy: float) -> Tuple[float, float]:
    motion = spec.motion
    theta = math.radians(motion.rotation)
    c, s = math.cos(theta), math.sin(theta)
    px = 0.5 + motion.translation[0] + motion.scale * (c * qx - s * qy)
    py = 0.5 + motion.translation[1] + motion.scale * (s * qx + c * qy)
    return px, py


def _inside(qx: np.ndarray, qy: np.ndarray, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    return ((qx - cx) / rx) ** 2 + ((qy - cy) / ry) ** 2 <= 1.0


def eye_half_height(spec: SyntheticHeadSpec) -> float:
    return EYE_MAX_HALF_HEIGHT * spec.motion.eye_openness


def mouth_half_height(spec: SyntheticHeadSpec) -> float:
    return MOUTH_MAX_HALF_HEIGHT * spec.motion.mouth_openness


def face_ellipse(spec: SyntheticHeadSpec) -> np.ndarray:
    qx, qy = _local_grid(spec)
    a, b = spec.identity.head_axes
    return _inside(qx, qy, 0.0, 0.0, a, b)


def render_labels(spec: SyntheticHeadSpec) -> np.ndarray:
    """Class index per pixel, painted back to front."""
    ident = spec.identity
    a, b = ident.head_axes
    qx, qy = _local_grid(spec)
    labels = np.zeros(qx.shape, dtype=np.uint8)
    face = _inside(qx, qy, 0.0, 0.0, a, b)
    ex = 0.4 * a

    labels[(np.abs(qx) < 0.45 * a) & (qy > 0.6 * b)] = SegClass.NECK
    if ident.hair_extent > 0.0:
        width = 0.02 + 0.05 * ident.hair_extent
        cut = -0.2 * b + 1.1 * b * ident.hair_extent
        labels[_inside(qx, qy, 0.0, 0.0, a + width, b + width) & (qy < cut)] = SegClass.HAIR
    labels[_inside(qx, qy, -a, EAR_Y, 0.035, 0.055)] = SegClass.LEFT_EAR
    labels[_inside(qx, qy, a, EAR_Y, 0.035, 0.055)] = SegClass.RIGHT_EAR
    labels[face] = SegClass.SKIN
    if ident.hair_extent > 0.0:
        labels[face & (qy < -0.72 * b)] = SegClass.HAIR
    if ident.beard:
        labels[face & (qy > BEARD_TOP_Y)] = SegClass.BEARD
    labels[_inside(qx, qy, 0.0, 0.05, 0.022, 0.04)] = SegClass.NOSE

    for side, brow, eye in ((-1.0, SegClass.LEFT_BROW, SegClass.LEFT_EYE), (1.0, SegClass.RIGHT_BROW, SegClass.RIGHT_EYE)):
        labels[(np.abs(qx - side * ex) < 0.17 * a) & (np.abs(qy - BROW_Y) < 0.012)] = brow
        eh = eye_half_height(spec)
        if eh > 0.0:
            labels[_inside(qx, qy, side * ex, EYE_Y, 0.15 * a, eh)] = eye

    mh = mouth_half_height(spec)
    labels[_inside(qx, qy, 0.0, MOUTH_Y, 0.4 * a, 0.022 + mh)] = SegClass.LIPS
    if mh > 0.0:
        mouth = _inside(qx, qy, 0.0, MOUTH_Y, 0.3 * a, mh)
        labels[mouth] = SegClass.MOUTH
        if spec.motion.mouth_openness > 0.5:
            # teeth along the upper edge, with a gap in the middle column
            labels[mouth & (qy < MOUTH_Y - 0.5 * mh) & (np.abs(qx) > 0.08 * a)] = SegClass.TEETH

    if ident.glasses:
        bar = np.abs(qy - EYE_Y) < 0.008
        labels[bar & (np.abs(qx) < 0.25 * a)] = SegClass.GLASSES
        labels[bar & (np.abs(qx) > 0.55 * a) & (np.abs(qx) < a)] = SegClass.GLASSES
    if ident.hat:
        crown = _inside(qx, qy, 0.0, 0.0, a + 0.05, b + 0.05) & (qy < -0.7 * b)
        brim = (np.abs(qy + 0.7 * b) < 0.015) & (np.abs(qx) < a + 0.07)
        labels[crown | brim] = SegClass.HAT
    if ident.headphones:
        outer = _inside(qx, qy, 0.0, 0.0, a + 0.05, b + 0.05)
        inner = _inside(qx, qy, 0.0, 0.0, a + 0.03, b + 0.03)
        labels[outer & ~inner & (qy < -0.2 * b)] = SegClass.HEADPHONE
        labels[_inside(qx, qy, -(a + 0.01), EAR_Y, 0.04, 0.065)] = SegClass.HEADPHONE
        labels[_inside(qx, qy, a + 0.01, EAR_Y, 0.04, 0.065)] = SegClass.HEADPHONE
    if ident.earrings:
        labels[_inside(qx, qy, -a, 0.06, 0.015, 0.015)] = SegClass.EARRING
        labels[_inside(qx, qy, a, 0.06, 0.015, 0.015)] = SegClass.EARRING
    return labels


def _palette(ident: IdentityParams) -> Dict[int, np.ndarray]:
    skin = np.asarray(ident.skin_color)
    hair = np.asarray(ident.hair_color)
    accessory = np.asarray(ident.accessory_color)
    return {
        SegClass.NECK: skin * 0.9,
        SegClass.SKIN: skin,
        SegClass.LEFT_BROW: hair * 0.6,
        SegClass.RIGHT_BROW: hair * 0.6,
        SegClass.LEFT_EYE: np.asarray(ident.eye_color),
        SegClass.RIGHT_EYE: np.asarray(ident.eye_color),
        SegClass.MOUTH: np.asarray(MOUTH_COLOR),
        SegClass.TEETH: np.asarray(TEETH_COLOR),
        SegClass.LIPS: np.asarray(ident.lip_color),
        SegClass.LEFT_EAR: skin * 0.95,
        SegClass.RIGHT_EAR: skin * 0.95,
        SegClass.NOSE: skin * 0.92,
        SegClass.BEARD: hair * 0.9,
        SegClass.HAIR: hair,
        SegClass.HAT: np.asarray(ident.hat_color),
        SegClass.HEADPHONE: accessory,
        SegClass.GLASSES: accessory,
        SegClass.EARRING: np.asarray(EARRING_COLOR),
    }


def fixture_keypoints(spec: SyntheticHeadSpec) -> KeypointSet:
    """Exact keypoints of a render, normalized to the image window."""
    a, b = spec.identity.head_axes
    ex = 0.4 * a
    eh = eye_half_height(spec)
    mh = mouth_half_height(spec)
    local = {
        "left_eye_upper": (-ex, EYE_Y - eh),
        "left_eye_lower": (-ex, EYE_Y + eh),
        "right_eye_upper": (ex, EYE_Y - eh),
        "right_eye_lower": (ex, EYE_Y + eh),
        "lip_upper": (0.0, MOUTH_Y - mh),
        "lip_lower": (0.0, MOUTH_Y + mh),
        "nose_tip": (0.0, NOSE_TIP_Y),
        "chin": (0.0, b),
        "left_ear": (-a, EAR_Y),
        "right_ear": (a, EAR_Y),
        "forehead": (0.0, -0.6 * b),
    }
    points = np.asarray([_to_image(spec, *local[name]) for name in FIXTURE_KEYPOINT_NAMES])
    return KeypointSet(points)


@dataclass(frozen=True)
class SyntheticSample:
    """One rendered frame and its exact annotations."""

    spec: SyntheticHeadSpec
    image: Image
    segmap: SegMap
    keypoints: KeypointSet
    soft_mask: Mask

    @property
    def head(self) -> Mask:
        return head_mask(self.segmap)


def render(spec: SyntheticHeadSpec) -> SyntheticSample:
    """
    Render a head.

    The image is snapped to the 8-bit grid so a saved and reloaded sample equals the
    in-memory one.
    """
    labels = render_labels(spec)
    n = spec.resolution
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n
    shade = (0.85 + 0.3 * coords)[:, None, None]
    data = np.clip(np.asarray(spec.identity.background_color)[None, None, :] * shade, 0.0, 1.0)
    data = np.broadcast_to(data, (n, n, 3)).copy()
    for label, color in _palette(spec.identity).items():
        data[labels == label] = np.clip(color, 0.0, 1.0)
    segmap = SegMap(labels)
    soft = feather(head_mask(segmap), SOFT_MASK_SIGMA)
    return SyntheticSample(
        spec=spec,
        image=Image(quantize(data)),
        segmap=segmap,
        keypoints=fixture_keypoints(spec),
        soft_mask=Mask(quantize(soft.data)),
    )


def render_reenacted(source: SyntheticHeadSpec, target: SyntheticHeadSpec) -> SyntheticSample:
    """The ideal reenactment: source identity under the target's motion."""
    return render(source.with_motion(target.motion))


@dataclass(frozen=True)
class SyntheticPair:
    """Two frames of the same identity with different motion."""

    index: int
    source: SyntheticSample
    target: SyntheticSample


def _make_pair(index: int, seed_seq: np.random.SeedSequence, resolution: int) -> SyntheticPair:
    rng = np.random.default_rng(seed_seq)
    identity = sample_identity(rng)
    source = SyntheticHeadSpec(identity=identity, motion=sample_motion(rng), resolution=resolution)
    target = source.with_motion(sample_motion(rng))
    return SyntheticPair(index=index, source=render(source), target=render(target))


class SyntheticDataset:
    """
    Ordered self-reenactment pairs plus the settings that generated them.

    Every image of a dataset is registered with the process-wide segmentation registry on
    construction, so `segment(img)` serves fixture images without an explicit provider.
    """

    def __init__(self, pairs: List[SyntheticPair], resolution: int, seed: int) -> None:
        self.pairs = pairs
        self.resolution = resolution
        self.seed = seed
        self.register(default_registry())

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> SyntheticPair:
        return self.pairs[index]

    def __iter__(self) -> Iterator[SyntheticPair]:
        return iter(self.pairs)

    def samples(self) -> List[SyntheticSample]:
        return [s for pair in self.pairs for s in (pair.source, pair.target)]

    def cross_pairs(self) -> List[Tuple[SyntheticSample, SyntheticSample]]:
        """(source of pair i, target of pair i + 1): different identities."""
        n = len(self.pairs)
        if n < 2:
            return []
        return [(self.pairs[i].source, self.pairs[(i + 1) % n].target) for i in range(n)]

    def register(self, segmenter: RegistrySegmenter) -> None:
        """Make every image of the dataset known to a lookup segmenter."""
        for sample in self.samples():
            segmenter.register(sample.image, sample.segmap)

    def save(self, directory: Union[str, Path]) -> Path:
        """
        Write the dataset as PNGs plus JSON metadata; the same dataset always produces the
        same bytes.
        """
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": DATASET_FORMAT_VERSION,
            "n_pairs": len(self.pairs),
            "resolution": self.resolution,
            "seed": self.seed,
            "taxonomy": taxonomy_manifest(),
        }
        _write_json(root / "manifest.json", manifest)
        for pair in self.pairs:
            pair_dir = root / "pairs" / f"{pair.index:05d}"
            pair_dir.mkdir(parents=True, exist_ok=True)
            for role, sample in (("source", pair.source), ("target", pair.target)):
                save_image(sample.image, pair_dir / f"{role}.png")
                save_segmap(sample.segmap, pair_dir / f"{role}_seg.png")
                save_mask(sample.soft_mask, pair_dir / f"{role}_soft.png")
                _write_json(
                    pair_dir / f"{role}.json",
                    {"spec": sample.spec.model_dump(mode="json"), "keypoints": sample.keypoints.to_dict()},
                )
        logger.info("Wrote %d pairs to %s", len(self.pairs), root)
        return root

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "SyntheticDataset":
        root = Path(directory)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise InvalidArgumentError(f"No dataset manifest in {root}", "data")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("format_version") != DATASET_FORMAT_VERSION:
            raise InvalidArgumentError(f"Unsupported dataset format {manifest.get('format_version')}", "data")
        pairs: List[SyntheticPair] = []
        for index in range(int(manifest["n_pairs"])):
            pair_dir = root / "pairs" / f"{index:05d}"
            samples = [_load_sample(pair_dir, role) for role in ("source", "target")]
            pairs.append(SyntheticPair(index=index, source=samples[0], target=samples[1]))
        return cls(pairs, int(manifest["resolution"]), int(manifest["seed"]))


def _write_json(path: Path, payload: object) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_sample(pair_dir: Path, role: str) -> SyntheticSample:
    meta = json.loads((pair_dir / f"{role}.json").read_text(encoding="utf-8"))
    return SyntheticSample(
        spec=SyntheticHeadSpec.model_validate(meta["spec"]),
        image=load_image(pair_dir / f"{role}.png"),
        segmap=load_segmap(pair_dir / f"{role}_seg.png"),
        keypoints=KeypointSet.from_dict(meta["keypoints"]),
        soft_mask=load_mask(pair_dir / f"{role}_soft.png"),
    )


def gen_synthetic(
    n_pairs: int,
    resolution: int = 64,
    seed: int = 0,
    workers: int = 4,
    progress: bool = False,
) -> SyntheticDataset:
    """
    Generate self-reenactment pairs.

    Each pair draws its own child seed from the dataset seed, so the result does not
    depend on the number of workers.

    Args:
        n_pairs: Number of pairs
        resolution: Square image side
        seed: Dataset seed
        workers: Render threads
        progress: Show a progress bar

    Returns:
        SyntheticDataset
    """
    if n_pairs < 0:
        raise InvalidArgumentError(f"n_pairs must be >= 0, got {n_pairs}", "n_pairs")
    seeds = np.random.SeedSequence(seed).spawn(n_pairs)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(lambda i: _make_pair(i, seeds[i], resolution), range(n_pairs))
        pairs = list(tqdm(results, total=n_pairs, desc="gen-data", disable=not progress))
    logger.info("Generated %d synthetic pairs at %dx%d (seed %d)", n_pairs, resolution, resolution, seed)
    return SyntheticDataset(pairs, resolution, seed)


def load_or_generate(directory: Optional[Union[str, Path]], n_pairs: int, resolution: int, seed: int) -> SyntheticDataset:
    if directory is not None and (Path(directory) / "manifest.json").exists():
        return SyntheticDataset.load(directory)
    return gen_synthetic(n_pairs, resolution, seed)
