"""Per-image proxies for visual-SLAM quality: corner detection with binary
descriptors, frame-to-frame matching, grid coverage, and the detect+match
reward.

Detection runs on the 8-bit tone-mapped image (DN // 16). Descriptors are
256-bit intensity comparisons on a lightly smoothed patch, matched by mutual
nearest neighbor under a Hamming threshold and ratio test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .core import DN_MAX, Image12

DEFAULT_MAX_FEATURES = 3000
DEFAULT_FAST_THRESHOLD = 12
DEFAULT_MATCH_MAX_DISTANCE = 64
DEFAULT_MATCH_RATIO = 0.8
_CELL_PX = 16  # spatial bucket size for per-cell suppression
_PATCH_RADIUS = 8
_SEGMENT_ARC = 9  # contiguous circle pixels required for a corner

# Bresenham circle of radius 3 as (dy, dx) offsets, clockwise from 12 o'clock.
CIRCLE_OFFSETS = (
    (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
    (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
)

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def _descriptor_pattern() -> np.ndarray:
    """Fixed pseudorandom comparison pattern: 256 point pairs inside the patch."""
    rng = np.random.default_rng(987654321)
    pairs = np.clip(
        np.round(rng.normal(0.0, 3.0, size=(256, 4))), -_PATCH_RADIUS, _PATCH_RADIUS
    ).astype(np.int64)
    return pairs


_PATTERN = _descriptor_pattern()


@dataclass(frozen=True)
class FeatureSet:
    """Keypoints as (x, y) pixel coordinates with responses and descriptors."""

    keypoints: np.ndarray  # (n, 2) float64, x then y
    responses: np.ndarray  # (n,) float64
    descriptors: np.ndarray  # (n, 32) uint8, 256 bits per keypoint

    def __post_init__(self) -> None:
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2).copy()
        resp = np.asarray(self.responses, dtype=np.float64).reshape(-1).copy()
        desc = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, 32).copy()
        if not (len(kp) == len(resp) == len(desc)):
            raise ValueError("keypoints, responses, descriptors must align")
        for arr in (kp, resp, desc):
            arr.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "responses", resp)
        object.__setattr__(self, "descriptors", desc)

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(np.empty((0, 2)), np.empty(0), np.empty((0, 32), dtype=np.uint8))

    def __len__(self) -> int:
        return len(self.keypoints)


def tone_map(img: Image12) -> np.ndarray:
    """12-bit to 8-bit by integer division (DN // 16)."""
    return (img.data >> 4).astype(np.uint8)


def _normalized(image: Union[Image12, np.ndarray]) -> np.ndarray:
    if isinstance(image, Image12):
        return image.data.astype(np.float64) / DN_MAX
    return np.asarray(image, dtype=np.float64)


def grad_score(image: Union[Image12, np.ndarray], mask: Optional[np.ndarray] = None) -> float:
    """Mean gradient magnitude of the normalized image, optionally over a mask."""
    arr = _normalized(image)
    gy, gx = np.gradient(arr)
    mag = np.sqrt(gx**2 + gy**2)
    if mask is not None:
        if not mask.any():
            return 0.0
        mag = mag[mask]
    return float(mag.mean())


def entropy_score(image: Union[Image12, np.ndarray]) -> float:
    """Shannon entropy of the 256-bin intensity histogram, normalized to [0, 1]."""
    arr = _normalized(image)
    bins = np.clip((arr * 256.0).astype(np.int64), 0, 255)
    counts = np.bincount(bins.ravel(), minlength=256).astype(np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum() / 8.0)


def _segment_corners(img8: np.ndarray, threshold: int) -> np.ndarray:
    """Corner response map: contiguous-arc segment test on the radius-3 circle.

    A pixel is a corner when at least 9 consecutive circle pixels are all
    brighter than center+threshold or all darker than center-threshold. The
    response is the summed threshold excess of the stronger polarity.
    """
    h, w = img8.shape
    response = np.zeros((h, w), dtype=np.float64)
    if h < 7 or w < 7:
        return response
    im = img8.astype(np.int16)
    center = im[3 : h - 3, 3 : w - 3]
    ring = np.stack(
        [im[3 + dy : h - 3 + dy, 3 + dx : w - 3 + dx] for dy, dx in CIRCLE_OFFSETS]
    )
    for sign in (1, -1):
        excess = sign * (ring - center) - threshold
        hot = excess > 0
        # Longest circular run of qualifying pixels, via a wrapped running count.
        run = np.zeros_like(center, dtype=np.int16)
        best = np.zeros_like(run)
        for k in range(16 + _SEGMENT_ARC - 1):
            run = (run + 1) * hot[k % 16]
            np.maximum(best, run, out=best)
        corner = best >= _SEGMENT_ARC
        score = np.where(corner, (np.maximum(excess, 0)).sum(axis=0), 0.0)
        np.maximum(response[3 : h - 3, 3 : w - 3], score, out=response[3 : h - 3, 3 : w - 3])
    return response


def _local_maxima(response: np.ndarray) -> np.ndarray:
    """3x3 non-maximum suppression; plateau cells all survive."""
    padded = np.pad(response, 1, mode="constant")
    keep = response > 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            keep &= response >= padded[1 + dy : padded.shape[0] - 1 + dy,
                                       1 + dx : padded.shape[1] - 1 + dx]
    return keep


def _box3(arr: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge padding."""
    p = np.pad(arr.astype(np.float64), 1, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += p[dy : dy + arr.shape[0], dx : dx + arr.shape[1]]
    return out / 9.0


def _describe(img8: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    smooth = _box3(img8)
    a = smooth[ys[None, :] + _PATTERN[:, 0:1], xs[None, :] + _PATTERN[:, 1:2]]
    b = smooth[ys[None, :] + _PATTERN[:, 2:3], xs[None, :] + _PATTERN[:, 3:4]]
    bits = (a < b).astype(np.uint8)  # (256, n)
    return np.packbits(bits, axis=0).T.copy()  # (n, 32)


def detect(
    img: Image12,
    max_features: int = DEFAULT_MAX_FEATURES,
    threshold: int = DEFAULT_FAST_THRESHOLD,
) -> FeatureSet:
    """Corner keypoints with descriptors, capped at max_features.

    The cap is filled round-robin across spatial cells in response order, so
    strong texture in one region cannot crowd out the rest of the frame.
    """
    if max_features < 0:
        raise ValueError("max_features must be >= 0")
    img8 = tone_map(img)
    response = _segment_corners(img8, threshold)
    keep = _local_maxima(response)
    # Descriptor sampling needs the full patch inside the image.
    keep[: _PATCH_RADIUS, :] = False
    keep[-_PATCH_RADIUS :, :] = False
    keep[:, : _PATCH_RADIUS] = False
    keep[:, -_PATCH_RADIUS :] = False
    ys, xs = np.nonzero(keep)
    if len(ys) == 0 or max_features == 0:
        return FeatureSet.empty()
    resp = response[ys, xs]

    # Round-robin over cells: everyone's best corner first, then second-best.
    cells = (ys // _CELL_PX) * (1 + img.width // _CELL_PX) + (xs // _CELL_PX)
    order = np.lexsort((xs, ys, -resp, cells))  # by cell, response desc, y, x
    cells_sorted = cells[order]
    # Rank within each cell, then stable-sort by (rank, cell) for round-robin.
    starts = np.flatnonzero(np.r_[True, cells_sorted[1:] != cells_sorted[:-1]])
    rank = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    pick = order[np.lexsort((cells_sorted, rank))][:max_features]

    ys, xs, resp = ys[pick], xs[pick], resp[pick]
    descriptors = _describe(img8, ys, xs)
    keypoints = np.stack([xs, ys], axis=1).astype(np.float64)
    return FeatureSet(keypoints, resp, descriptors)


def hamming_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(na, nb) Hamming distance matrix between packed descriptor rows."""
    xor = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return _POPCOUNT[xor].sum(axis=2, dtype=np.int32)


def match(
    a: FeatureSet,
    b: FeatureSet,
    max_distance: int = DEFAULT_MATCH_MAX_DISTANCE,
    ratio: float = DEFAULT_MATCH_RATIO,
) -> int:
    """Count of mutual-nearest-neighbor descriptor matches.

    A pair counts when each is the other's nearest neighbor, the distance is
    within max_distance, and both sides pass the best/second-best ratio test.
    """
    if len(a) == 0 or len(b) == 0:
        return 0
    d = hamming_distances(a.descriptors, b.descriptors)
    nn_ab = d.argmin(axis=1)
    nn_ba = d.argmin(axis=0)
    idx = np.arange(len(a))
    mutual = nn_ba[nn_ab] == idx
    best = d[idx, nn_ab]
    ok = mutual & (best <= max_distance)
    if d.shape[1] >= 2:
        second_a = np.partition(d, 1, axis=1)[:, 1]
        ok &= best < ratio * second_a
    if d.shape[0] >= 2:
        second_b = np.partition(d, 1, axis=0)[1, :]
        ok &= best < ratio * second_b[nn_ab]
    return int(ok.sum())


def grid_coverage(fs: FeatureSet, img_shape: Tuple[int, int], n: int = 20) -> float:
    """Fraction of an n x n grid's cells containing at least one keypoint."""
    if n < 1:
        raise ValueError("grid side must be >= 1")
    if len(fs) == 0:
        return 0.0
    height, width = img_shape
    cx = np.minimum((fs.keypoints[:, 0] * n / width).astype(np.int64), n - 1)
    cy = np.minimum((fs.keypoints[:, 1] * n / height).astype(np.int64), n - 1)
    return float(len(set(zip(cy.tolist(), cx.tolist()))) / (n * n))


def feature_reward(
    curr: FeatureSet, matches: int, w_detect: float = 1.0, w_match: float = 1.0
) -> float:
    """Weighted sum of detected keypoints and matches with the previous frame."""
    if w_detect < 0 or w_match < 0:
        raise ValueError("weights must be >= 0")
    return w_detect * len(curr) + w_match * matches
