"""Exposure emulation: synthesize an image at any target exposure time from a
bracket frame.

Source selection prefers the next-higher bracket so pixel values scale down
(keeping photon shot noise low), unless that bracket is saturated beyond the
configured threshold, in which case the next-lower bracket is scaled up.
Out-of-range targets use the closest ladder end.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .core import BracketFrame, Image12, saturation_level
from .crf import Crf, NoiseProfile, apply_forward
from .errors import DimensionMismatch

DEFAULT_ALPHA = 0.01


@dataclass(frozen=True)
class EmulatorConfig:
    """Response table plus the saturation fraction above which the higher
    bounding bracket is rejected."""

    crf: Crf
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")


def select_source(
    frame: BracketFrame, target_ms: float, cfg: EmulatorConfig
) -> Tuple[Image12, float]:
    """Pick the source bracket for a target exposure.

    Exact ladder hits return that bracket unconditionally (ratio-1 emulation
    is lossless). Targets beyond the ladder use the closest end. In-between
    targets take the higher bracket when its saturation level is below alpha,
    else the lower one.
    """
    if target_ms <= 0:
        raise ValueError("target exposure must be positive")
    exposures = frame.exposures_ms
    for img, exp in zip(frame.images, exposures):
        if target_ms == exp:
            return img, exp
    if target_ms < exposures[0]:
        return frame.images[0], exposures[0]
    if target_ms > exposures[-1]:
        return frame.images[-1], exposures[-1]
    hi = bisect.bisect_left(exposures, target_ms)
    if saturation_level(frame.images[hi]) < cfg.alpha:
        return frame.images[hi], exposures[hi]
    return frame.images[hi - 1], exposures[hi - 1]


def emulate(frame: BracketFrame, target_ms: float, cfg: EmulatorConfig) -> Image12:
    """Image at the target exposure: scale the source pixels through the
    response table by the exposure ratio."""
    source, source_ms = select_source(frame, target_ms, cfg)
    if target_ms == source_ms:
        return source
    e = (target_ms / source_ms) * cfg.crf.inverse[source.data]
    return Image12(apply_forward(cfg.crf, e))


def emulation_rmse(
    emulated: Image12,
    ground_truth: Image12,
    noise: NoiseProfile,
    exposure_ms: float,
) -> float:
    """Noise-adjusted RMSE in DN between an emulated image and ground truth."""
    if emulated.shape != ground_truth.shape:
        raise DimensionMismatch("images must share dimensions")
    diff = emulated.data.astype(np.float64) - ground_truth.data.astype(np.float64)
    rmse = float(np.sqrt(np.mean(diff**2)))
    return max(0.0, rmse - noise.rmse_at(exposure_ms))
