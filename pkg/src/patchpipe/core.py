"""Core domain types shared by every stage of the assay toolkit.

All types are immutable value objects: safe to share across threads and to
use as dictionary keys where hashable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KEYPOINT_NAMES = ("head", "neck", "waist", "abdomen")


class PatchpipeError(Exception):
    """Base class for all data errors raised by this package."""


class ValidationError(PatchpipeError, ValueError):
    """A domain object violates one of its invariants."""


class DimensionError(PatchpipeError, ValueError):
    """Vector or image dimensions do not match the operation's contract."""


@dataclass(frozen=True)
class Point2:
    """A planar point in pixel coordinates (origin top-left, y downward)."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"point coordinates must be finite, got ({self.x}, {self.y})")


def point_distance(p: Point2, q: Point2) -> float:
    """Euclidean distance between two points."""
    return math.hypot(p.x - q.x, p.y - q.y)


@dataclass(frozen=True)
class Pose:
    """One detected bee: up to four named keypoints plus a detector score.

    Keypoints are optional because real detectors drop occluded points;
    consumers declare which ones they require.
    """

    head: Point2 | None = None
    neck: Point2 | None = None
    waist: Point2 | None = None
    abdomen: Point2 | None = None
    score: float = 1.0

    def __post_init__(self) -> None:
        if self.head is None and self.neck is None and self.waist is None and self.abdomen is None:
            raise ValidationError("pose must have at least one keypoint")
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValidationError(f"pose score must be in [0, 1], got {self.score}")

    def keypoints(self) -> dict[str, Point2]:
        """Present keypoints by name, in canonical order."""
        out: dict[str, Point2] = {}
        for name in KEYPOINT_NAMES:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def anchor(self) -> Point2:
        """Association anchor: the waist if present, else the centroid of
        the available keypoints."""
        if self.waist is not None:
            return self.waist
        points = list(self.keypoints().values())
        return Point2(
            sum(p.x for p in points) / len(points),
            sum(p.y for p in points) / len(points),
        )


@dataclass(frozen=True)
class FrameDetections:
    """All poses detected in one video frame."""

    frame_index: int
    poses: tuple[Pose, ...]

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValidationError(f"frame index must be nonnegative, got {self.frame_index}")
        object.__setattr__(self, "poses", tuple(self.poses))


@dataclass(frozen=True)
class Track:
    """Time-ordered poses of one individual within one video."""

    track_id: int
    entries: tuple[tuple[int, Pose], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValidationError(f"track {self.track_id} has no entries")
        frames = [f for f, _ in self.entries]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValidationError(f"track {self.track_id} entries must be strictly frame-ordered")

    @property
    def start_frame(self) -> int:
        return self.entries[0][0]

    @property
    def end_frame(self) -> int:
        return self.entries[-1][0]


@dataclass(frozen=True)
class Flower:
    """One artificial flower: a bright square with a nectar well at its center."""

    flower_id: int
    center_well: Point2
    well_radius: float
    square_side: float
    color_tag: str = ""

    def __post_init__(self) -> None:
        if self.well_radius <= 0:
            raise ValidationError(f"flower {self.flower_id}: well radius must be positive")
        if self.square_side <= 0:
            raise ValidationError(f"flower {self.flower_id}: square side must be positive")


@dataclass(frozen=True)
class VisitEvent:
    """One nectar-drinking visit: a flower, a short-term track, and a frame span."""

    flower_id: int
    track_id: int
    start_frame: int
    end_frame: int

    def __post_init__(self) -> None:
        if self.start_frame > self.end_frame:
            raise ValidationError(
                f"visit event start {self.start_frame} after end {self.end_frame}"
            )

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame + 1


@dataclass(frozen=True)
class EmbeddingVector:
    """Identity feature vector compared by Euclidean distance.

    Trained embedders produce unit-norm 128-d vectors; the PCA baseline
    produces unnormalized k-d vectors and sets ``normalized=False``.
    """

    values: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError(f"embedding must be 1-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("embedding contains non-finite values")
        if self.normalized:
            norm = float(np.linalg.norm(values))
            if abs(norm - 1.0) > 1e-6:
                raise ValidationError(f"normalized embedding has norm {norm}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def euclidean_distance(a: EmbeddingVector | np.ndarray, b: EmbeddingVector | np.ndarray) -> float:
    """Euclidean distance between two equal-length embedding vectors."""
    va = a.values if isinstance(a, EmbeddingVector) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, EmbeddingVector) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionError(f"embedding dimensions differ: {va.shape[0]} vs {vb.shape[0]}")
    return float(np.sqrt(np.sum((va - vb) ** 2)))


@dataclass(frozen=True)
class ImageBuffer:
    """Raw 8-bit raster, row-major, 1 (gray) or 3 (RGB) channels."""

    width: int
    height: int
    channels: int
    data: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image size must be positive, got {self.width}x{self.height}")
        expected = self.width * self.height * self.channels
        if len(self.data) != expected:
            raise DimensionError(
                f"image data length {len(self.data)} != width*height*channels = {expected}"
            )

    def to_array(self) -> np.ndarray:
        """Read-only (height, width, channels) uint8 view of the raster."""
        arr = np.frombuffer(self.data, dtype=np.uint8)
        return arr.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise DimensionError(f"expected (h, w) or (h, w, 1|3) array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValidationError(f"expected uint8 samples, got {arr.dtype}")
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, data=arr.tobytes())
