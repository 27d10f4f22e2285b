"""
Named 2D keypoints with lower/upper pairs for eyelids and lips.

Coordinates are (x, y) normalized to the image (crop) window, so (0, 0) is the top-left
corner and (1, 1) the bottom-right corner.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .exceptions import InvalidArgumentError

FIXTURE_KEYPOINT_NAMES: Tuple[str, ...] = (
    "left_eye_upper",
    "left_eye_lower",
    "right_eye_upper",
    "right_eye_lower",
    "lip_upper",
    "lip_lower",
    "nose_tip",
    "chin",
    "left_ear",
    "right_ear",
    "forehead",
)

# (lower, upper) index pairs into FIXTURE_KEYPOINT_NAMES
FIXTURE_PAIRS: Tuple[Tuple[int, int], ...] = ((1, 0), (3, 2), (5, 4))


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Keypoints plus the (lower, upper) pairs the closure loss compares."""

    points: np.ndarray
    names: Tuple[str, ...] = FIXTURE_KEYPOINT_NAMES
    pairs: Tuple[Tuple[int, int], ...] = field(default=FIXTURE_PAIRS)

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64, copy=True)
        if points.ndim != 2 or points.shape[1] != 2:
            raise InvalidArgumentError(f"Keypoints must have shape (K, 2), got {points.shape}", "points")
        if len(self.names) != points.shape[0]:
            raise InvalidArgumentError(
                f"{len(self.names)} names given for {points.shape[0]} keypoints", "names"
            )
        if not np.isfinite(points).all():
            raise InvalidArgumentError("Keypoints must be finite", "points")
        lowers = [lower for lower, _ in self.pairs]
        if len(set(lowers)) != len(lowers):
            raise InvalidArgumentError("Every lower keypoint must have exactly one upper partner", "pairs")
        for lower, upper in self.pairs:
            for idx in (lower, upper):
                if not 0 <= idx < points.shape[0]:
                    raise InvalidArgumentError(f"Pair index {idx} out of range", "pairs")
            if lower == upper:
                raise InvalidArgumentError("A keypoint cannot pair with itself", "pairs")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def lower_flags(self) -> np.ndarray:
        flags = np.zeros(len(self), dtype=bool)
        flags[[lower for lower, _ in self.pairs]] = True
        return flags

    def point(self, name: str) -> np.ndarray:
        return self.points[self.names.index(name)]

    def gaps(self) -> np.ndarray:
        """Per-pair L1 distance between lower and upper points."""
        lower = self.points[[a for a, _ in self.pairs]]
        upper = self.points[[b for _, b in self.pairs]]
        return np.abs(lower - upper).sum(axis=1)

    def same_structure(self, other: "KeypointSet") -> bool:
        return len(self) == len(other) and self.pairs == other.pairs

    def shifted(self, offset: Sequence[float]) -> "KeypointSet":
        return KeypointSet(self.points + np.asarray(offset, dtype=np.float64), self.names, self.pairs)

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Return a (1, K, 2) tensor."""
        return torch.tensor(self.points, dtype=dtype).unsqueeze(0)

    def to_dict(self) -> Dict[str, object]:
        return {
            "names": list(self.names),
            "points": [[float(x), float(y)] for x, y in self.points],
            "pairs": [[a, b] for a, b in self.pairs],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "KeypointSet":
        names: List[str] = list(payload["names"])  # type: ignore[call-overload]
        pairs = tuple((int(a), int(b)) for a, b in payload["pairs"])  # type: ignore[union-attr]
        return cls(np.asarray(payload["points"], dtype=np.float64), tuple(names), pairs)

    @classmethod
    def from_tensor(
        cls,
        tensor: torch.Tensor,
        names: Optional[Tuple[str, ...]] = None,
        pairs: Optional[Tuple[Tuple[int, int], ...]] = None,
    ) -> "KeypointSet":
        array = tensor.detach().to("cpu", torch.float64).reshape(-1, 2).numpy()
        return cls(array, names or FIXTURE_KEYPOINT_NAMES, pairs or FIXTURE_PAIRS)
