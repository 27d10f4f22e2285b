"""
Head-parsing taxonomy, region extraction and segmentation providers.
"""

import hashlib
import json
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
from PIL import Image as PILImage

from .exceptions import InvalidArgumentError, ProviderError, UnavailableProviderError
from .imagecore import Image, Mask, read_png

logger = logging.getLogger(__name__)

TAXONOMY_VERSION = "1.0"


class SegClass(IntEnum):
    """The 20 head-parsing classes; indices are stable."""

    BACKGROUND = 0
    PERSON = 1
    SKIN = 2
    LEFT_BROW = 3
    RIGHT_BROW = 4
    LEFT_EYE = 5
    RIGHT_EYE = 6
    MOUTH = 7
    TEETH = 8
    LIPS = 9
    LEFT_EAR = 10
    RIGHT_EAR = 11
    NOSE = 12
    NECK = 13
    BEARD = 14
    HAIR = 15
    HAT = 16
    HEADPHONE = 17
    GLASSES = 18
    EARRING = 19


NUM_CLASSES = len(SegClass)

REGION_CLASSES: Dict[str, Tuple[SegClass, ...]] = {
    "face": (SegClass.SKIN,),
    "ears": (SegClass.LEFT_EAR, SegClass.RIGHT_EAR),
    "eyes": (SegClass.LEFT_EYE, SegClass.RIGHT_EYE),
    "brows": (SegClass.LEFT_BROW, SegClass.RIGHT_BROW),
    "nose": (SegClass.NOSE,),
    "lips": (SegClass.LIPS,),
    "mouth": (SegClass.MOUTH,),
    "teeth": (SegClass.TEETH,),
    "beard": (SegClass.BEARD,),
    "hair": (SegClass.HAIR,),
    "glasses": (SegClass.GLASSES,),
    "hat": (SegClass.HAT,),
    "headphones": (SegClass.HEADPHONE,),
    "earrings": (SegClass.EARRING,),
}

REGIONS: Tuple[str, ...] = tuple(REGION_CLASSES)

HEAD_CLASSES: Tuple[SegClass, ...] = tuple(c for c in SegClass if c >= SegClass.SKIN and c != SegClass.NECK)


@dataclass(frozen=True, eq=False)
class SegMap:
    """Per-pixel class labels over the head taxonomy."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.array(self.labels, copy=True)
        if labels.ndim != 2 or labels.size == 0:
            raise InvalidArgumentError(f"SegMap labels must be a non-empty (H, W) array, got {labels.shape}", "labels")
        if not np.issubdtype(labels.dtype, np.integer):
            raise InvalidArgumentError("SegMap labels must be integers", "labels")
        if labels.min() < 0 or labels.max() >= NUM_CLASSES:
            raise InvalidArgumentError(f"SegMap labels must lie in [0, {NUM_CLASSES})", "labels")
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.labels.shape[0]), int(self.labels.shape[1])

    @classmethod
    def background(cls, height: int, width: int) -> "SegMap":
        return cls(np.zeros((height, width), dtype=np.uint8))

    def class_mask(self, classes: Iterable[int]) -> Mask:
        return Mask.from_bool(np.isin(self.labels, list(classes)))

    def flip_horizontal(self) -> "SegMap":
        return SegMap(self.labels[:, ::-1])

    def equals(self, other: "SegMap") -> bool:
        return bool(np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class RegionSet:
    """Semantic region name -> sorted flat (row-major) pixel indices."""

    shape: Tuple[int, int]
    indices: Mapping[str, np.ndarray]

    def __getitem__(self, region: str) -> np.ndarray:
        return self.indices[region]

    def size(self, region: str) -> int:
        return int(self.indices[region].size)

    def nonempty(self) -> List[str]:
        return [r for r in REGIONS if self.indices[r].size > 0]

    def mask(self, region: str) -> Mask:
        flat = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        flat[self.indices[region]] = True
        return Mask.from_bool(flat.reshape(self.shape))

    def union_mask(self) -> Mask:
        flat = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        for region in REGIONS:
            flat[self.indices[region]] = True
        return Mask.from_bool(flat.reshape(self.shape))


def region_masks(seg: SegMap) -> RegionSet:
    flat = seg.labels.reshape(-1)
    indices: Dict[str, np.ndarray] = {}
    for region, classes in REGION_CLASSES.items():
        idx = np.flatnonzero(np.isin(flat, [int(c) for c in classes])).astype(np.int64)
        idx.setflags(write=False)
        indices[region] = idx
    return RegionSet(shape=seg.shape, indices=indices)


def head_mask(seg: SegMap, include_neck: bool = False) -> Mask:
    """Binary mask of every head class; the neck stays with the body unless requested."""
    classes = list(HEAD_CLASSES)
    if include_neck:
        classes.append(SegClass.NECK)
    return seg.class_mask(classes)


def hair_mask(seg: SegMap) -> Mask:
    return seg.class_mask([SegClass.HAIR])


def taxonomy_manifest() -> Dict[str, object]:
    return {
        "version": TAXONOMY_VERSION,
        "classes": {str(int(c)): c.name.lower() for c in SegClass},
        "regions": {r: [c.name.lower() for c in cs] for r, cs in REGION_CLASSES.items()},
    }


def write_taxonomy_manifest(path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(taxonomy_manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_segmap(seg: SegMap, path: Union[str, Path]) -> None:
    PILImage.fromarray(np.ascontiguousarray(seg.labels, dtype=np.uint8)).save(str(path), format="PNG")


def load_segmap(path: Union[str, Path]) -> SegMap:
    return SegMap(read_png(path, "L"))


def image_key(img: Image) -> str:
    """Content hash used to look images up in registries."""
    digest = hashlib.sha256()
    digest.update(np.asarray(img.shape, dtype=np.int64).tobytes())
    digest.update(np.ascontiguousarray(img.data).tobytes())
    return digest.hexdigest()


class SegmentationProvider(ABC):
    """Abstract base class for segmenters."""

    name = "abstract"

    @abstractmethod
    def segment(self, img: Image) -> SegMap:
        """
        Parse an image into the head taxonomy.

        Args:
            img: Image to parse

        Returns:
            SegMap with the image's shape

        Raises:
            UnavailableProviderError: If this provider cannot serve the image
        """
        pass

    @abstractmethod
    def is_available(self) -> bool:
        """Check if the provider is ready to serve requests."""
        pass


class RegistrySegmenter(SegmentationProvider):
    """Exact lookup of images rendered by the synthetic fixture (or registered by hand)."""

    name = "registry"

    def __init__(self) -> None:
        self._entries: Dict[str, SegMap] = {}
        self._lock = threading.Lock()

    def register(self, img: Image, seg: SegMap) -> None:
        if img.shape != seg.shape:
            raise InvalidArgumentError(f"SegMap shape {seg.shape} does not match image {img.shape}", "seg")
        with self._lock:
            self._entries[image_key(img)] = seg

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def segment(self, img: Image) -> SegMap:
        with self._lock:
            seg = self._entries.get(image_key(img))
        if seg is None:
            raise UnavailableProviderError("Image is not registered with the segmentation registry", self.name)
        return seg

    def is_available(self) -> bool:
        return True


class CallableSegmenter(SegmentationProvider):
    """Adapter for an external parsing model exposed as a label-array callable."""

    name = "callable"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], name: str = "callable") -> None:
        self._fn = fn
        self.name = name

    def segment(self, img: Image) -> SegMap:
        try:
            labels = self._fn(img.data)
        except Exception as e:
            raise ProviderError(f"Segmenter '{self.name}' failed: {str(e)}", self.name) from e
        seg = SegMap(np.asarray(labels))
        if seg.shape != img.shape:
            raise ProviderError(f"Segmenter '{self.name}' returned shape {seg.shape} for image {img.shape}", self.name)
        return seg

    def is_available(self) -> bool:
        return True


class ChainSegmenter(SegmentationProvider):
    """Try several providers in order; the first that can serve the image wins."""

    name = "chain"

    def __init__(self, providers: List[SegmentationProvider]) -> None:
        self.providers = providers

    def segment(self, img: Image) -> SegMap:
        for provider in self.providers:
            if not provider.is_available():
                continue
            try:
                seg = provider.segment(img)
            except UnavailableProviderError:
                continue
            logger.info("Segmentation served by %s", provider.name)
            return seg
        raise UnavailableProviderError("No segmentation provider could serve the image", self.name)

    def is_available(self) -> bool:
        return any(p.is_available() for p in self.providers)


_default_registry = RegistrySegmenter()


def default_registry() -> RegistrySegmenter:
    return _default_registry


def segment(img: Image, provider: Optional[SegmentationProvider] = None) -> SegMap:
    """Segment an image with the given provider, or the process-wide fixture registry."""
    return (provider if provider is not None else _default_registry).segment(img)
