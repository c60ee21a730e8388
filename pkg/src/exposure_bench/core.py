"""Core pixel containers and bracket-sequence types.

Pixel values are 12-bit digital numbers (DN, 0..4095) held in uint16 arrays.
Arithmetic happens in float64; results are rounded half-up and clamped when a
new image is materialized. All types here are immutable after construction and
safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

DN_MAX = 4095
DN_BITS = 12


def dn_from_float(values: np.ndarray) -> np.ndarray:
    """Round half-up and clamp float DN to the 12-bit range, as uint16."""
    arr = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(arr + 0.5), 0, DN_MAX).astype(np.uint16)


@dataclass(frozen=True)
class Image12:
    """Single-channel 12-bit image backed by a read-only (height, width) array."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("Image12 expects a non-empty 2-d array of DN")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("Image12 holds integer DN; use from_float for float data")
        if int(arr.min()) < 0 or int(arr.max()) > DN_MAX:
            raise ValueError(f"DN outside [0, {DN_MAX}]")
        arr = arr.astype(np.uint16, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_float(cls, values: np.ndarray) -> "Image12":
        return cls(dn_from_float(values))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


def mean_brightness(img: Image12) -> float:
    """Mean DN as a fraction of full scale, in [0, 1]."""
    return float(img.data.mean()) / DN_MAX


def saturation_level(img: Image12) -> float:
    """Fraction of pixels at the extreme DN values 0 or 4095."""
    data = img.data
    return float(((data == 0) | (data == DN_MAX)).mean())


@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation in meters plus a unit quaternion (qx, qy, qz, qw)."""

    translation: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4).copy()
        if abs(float(np.linalg.norm(q)) - 1.0) > 1e-6:
            raise ValueError("quaternion must be unit norm (qx, qy, qz, qw)")
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "quaternion", q)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]))


@dataclass(frozen=True)
class BracketFrame:
    """One bracketing cycle: N images of the same scene at a ladder of exposures.

    Exposures are milliseconds, strictly increasing; all images share
    dimensions and (approximately) a single camera position.
    """

    images: Tuple[Image12, ...]
    exposures_ms: Tuple[float, ...]
    timestamp: float = 0.0
    pose: Optional[Pose] = None

    def __post_init__(self) -> None:
        images = tuple(self.images)
        exposures = tuple(float(e) for e in self.exposures_ms)
        if len(images) < 2 or len(images) != len(exposures):
            raise ValueError("a bracket frame needs N >= 2 images, one exposure each")
        if exposures[0] <= 0.0:
            raise ValueError("exposures must be positive")
        if any(b <= a for a, b in zip(exposures, exposures[1:])):
            raise ValueError("exposures must be strictly increasing")
        if len({im.shape for im in images}) != 1:
            raise ValueError("all images in a frame must share dimensions")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "exposures_ms", exposures)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @property
    def n_brackets(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class BracketSequence:
    """Timestamp-ordered bracket frames sharing one exposure ladder."""

    frames: Tuple[BracketFrame, ...]
    id: str = ""

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        stamps = [f.timestamp for f in frames]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("frame timestamps must be strictly increasing")
        if len({f.exposures_ms for f in frames}) > 1:
            raise ValueError("all frames must share one exposure ladder")
        object.__setattr__(self, "frames", frames)

    @property
    def ladder_ms(self) -> Tuple[float, ...]:
        return self.frames[0].exposures_ms if self.frames else ()

    def __len__(self) -> int:
        return len(self.frames)
