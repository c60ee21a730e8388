"""Synthetic oracle scenes: known radiance, known response, known noise, and
(for drifting scenes) known camera track.

Radiance is stored per millisecond of exposure and normalized so that
``exposure_ms * radiance == 1`` maps to DN 4095 under the identity response.
Library scenes are scaled so the brightest pixel reaches roughly 98% of full
scale at the 32 ms ladder maximum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import BracketFrame, BracketSequence, Image12, Pose
from .crf import Crf, apply_forward

SeedLike = Union[int, Sequence[int]]

# Matches a bracket-cycle rate of about 3.66 full ladders per second.
DEFAULT_FRAME_PERIOD_S = 0.273


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """Ground-truth scene: per-ms radiance map plus response and noise models.

    ``brightness_curve`` rescales the whole map over time (day cycle);
    ``velocity_px_s`` slides the map (with wraparound) to mimic camera motion
    along a straight line at ``meters_per_px`` scale.
    """

    radiance: np.ndarray
    crf: Crf
    noise_sigma: float = 0.0
    brightness_curve: Optional[Callable[[float], float]] = None
    velocity_px_s: Tuple[float, float] = (0.0, 0.0)
    meters_per_px: float = 1.0
    name: str = "scene"

    def __post_init__(self) -> None:
        arr = np.asarray(self.radiance, dtype=np.float64).copy()
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("radiance must be a non-empty 2-d map")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("radiance must be finite and >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        arr.setflags(write=False)
        object.__setattr__(self, "radiance", arr)

    @property
    def moving(self) -> bool:
        return self.velocity_px_s != (0.0, 0.0)

    def radiance_at(self, t: float) -> np.ndarray:
        """Radiance map at time t: global brightness scale plus drift."""
        arr = self.radiance
        vx, vy = self.velocity_px_s
        if vx or vy:
            arr = np.roll(arr, (-round(vy * t), -round(vx * t)), axis=(0, 1))
        if self.brightness_curve is not None:
            scale = float(self.brightness_curve(t))
            if scale < 0:
                raise ValueError("brightness curve produced a negative scale")
            arr = arr * scale
        return arr

    def pose_at(self, t: float) -> Pose:
        vx, vy = self.velocity_px_s
        m = self.meters_per_px
        return Pose(np.array([vx * t * m, vy * t * m, 0.0]), np.array([0.0, 0.0, 0.0, 1.0]))


def render(
    scene: SyntheticScene, exposure_ms: float, seed: SeedLike = 0, t: float = 0.0
) -> Image12:
    """Ground-truth image at an exposure: radiance through the response table,
    plus optional additive Gaussian DN noise, rounded half-up and clamped."""
    if exposure_ms <= 0:
        raise ValueError("exposure must be positive")
    e = exposure_ms * scene.radiance_at(t)
    dn = apply_forward(scene.crf, e)
    if scene.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        return Image12.from_float(dn + rng.normal(0.0, scene.noise_sigma, dn.shape))
    return Image12(dn)


def render_bracket_sequence(
    scene: SyntheticScene,
    ladder_ms: Sequence[float],
    frame_count: int,
    seed: int = 0,
    frame_period_s: float = DEFAULT_FRAME_PERIOD_S,
    sequence_id: Optional[str] = None,
) -> BracketSequence:
    """Sequence of bracket frames; brackets within one frame share a time and
    pose. Each (frame, bracket) pair draws noise from its own seeded stream so
    output is independent of render order."""
    if frame_count < 0:
        raise ValueError("frame count must be >= 0")
    frames = []
    for k in range(frame_count):
        t = k * frame_period_s
        images = tuple(
            render(scene, dt, seed=[seed, k, i], t=t) for i, dt in enumerate(ladder_ms)
        )
        frames.append(
            BracketFrame(
                images=images,
                exposures_ms=tuple(float(d) for d in ladder_ms),
                timestamp=t,
                pose=scene.pose_at(t) if scene.moving else None,
            )
        )
    return BracketSequence(tuple(frames), id=sequence_id or scene.name)


def render_noise_repeats(
    scene: SyntheticScene,
    ladder_ms: Sequence[float],
    repeats: int = 25,
    seed: int = 0,
) -> List[Tuple[float, List[Image12]]]:
    """Repeated static captures per ladder exposure, for noise estimation."""
    if repeats < 2:
        raise ValueError("need at least 2 repeats per exposure")
    groups = []
    for i, dt in enumerate(ladder_ms):
        images = [render(scene, dt, seed=[seed, 1000 + i, k]) for k in range(repeats)]
        groups.append((float(dt), images))
    return groups


def _checker(height: int, width: int, cell: int, lo: float, hi: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return np.where((xx // cell + yy // cell) % 2 == 0, lo, hi)


def _dot_field(
    height: int,
    width: int,
    seed: int = 777,
    density_px: int = 90,
    lo: float = 0.5,
    hi: float = 1.6,
) -> np.ndarray:
    """Sparse 2x2 contrast blobs on a unit field.

    Pure checker edges never pass a 9-of-16 segment test, so scenes need
    isolated blobs for the corner detector to have anything to find.
    """
    rng = np.random.default_rng(seed)
    field = np.ones((height, width))
    count = height * width // density_px
    ys = rng.integers(1, height - 2, count)
    xs = rng.integers(1, width - 2, count)
    bright = rng.random(count) < 0.5
    for y, x, b in zip(ys, xs, bright):
        field[y : y + 2, x : x + 2] = hi if b else lo
    return field


def scene_library(
    height: int = 120,
    width: int = 160,
    crf: Optional[Crf] = None,
    noise_sigma: float = 0.0,
) -> Dict[str, SyntheticScene]:
    """Named oracle scenes used by tests and the synth CLI.

    constant          flat mid-gray, zero texture
    gradient_texture  horizontal ramp modulated by a checkerboard
    hdr_split         bright/dark halves 60 dB apart, mild texture on each
    day_cycle         gradient texture whose radiance quadruples every 8 s
    calibration_ramp  smooth 40 dB log ramp, dense DN coverage for response fits
    drift_texture     gradient texture sliding at constant velocity (known track)
    """
    crf = crf or Crf.identity()
    peak = 0.98 / 32.0  # brightest pixel hits ~98% full scale at 32 ms
    yy, xx = np.mgrid[0:height, 0:width]

    ramp = (xx + 1.0) / width
    checker = _checker(height, width, 8, 0.75, 1.25)
    dots = _dot_field(height, width)
    gradient = peak * ramp * checker * dots / (1.25 * 1.6)

    split = np.where(xx < width // 2, 1.0, 1e-3)
    hdr = peak * split * _checker(height, width, 8, 0.9, 1.0) * dots / 1.6

    log_ramp = peak * 10 ** (-2.0 * (1.0 - (yy * width + xx) / (height * width - 1.0)))

    def day_curve(t: float) -> float:
        return 4.0 ** (t / 8.0)

    scenes = {
        "constant": SyntheticScene(
            np.full((height, width), 0.55 * peak), crf, noise_sigma, name="constant"
        ),
        "gradient_texture": SyntheticScene(
            gradient, crf, noise_sigma, name="gradient_texture"
        ),
        "hdr_split": SyntheticScene(hdr, crf, noise_sigma, name="hdr_split"),
        "day_cycle": SyntheticScene(
            4.0 * gradient, crf, noise_sigma, brightness_curve=day_curve, name="day_cycle"
        ),
        "calibration_ramp": SyntheticScene(
            log_ramp, crf, noise_sigma, name="calibration_ramp"
        ),
        "drift_texture": SyntheticScene(
            gradient,
            crf,
            noise_sigma,
            velocity_px_s=(3.0, 1.0),
            meters_per_px=1.0,
            name="drift_texture",
        ),
    }
    return scenes
