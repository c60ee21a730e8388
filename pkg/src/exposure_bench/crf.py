"""Camera response estimation and per-exposure noise characterization.

The response is kept as a 4096-entry inverse lookup table: ``inverse[d]`` is
the normalized irradiance-exposure that produces DN ``d``. The table is
strictly increasing with endpoints pinned to 0 and 1, so the forward map
(irradiance-exposure to DN) is its exact table inverse.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .core import DN_MAX, Image12
from .errors import (
    DimensionMismatch,
    InsufficientExposureSpan,
    NonStaticStack,
    ParseError,
)

TABLE_SIZE = DN_MAX + 1

# Observation weights for the response fit: saturated DN carry no radiometric
# information, near-saturated DN are down-weighted.
_DN_WEIGHTS = np.ones(TABLE_SIZE)
_DN_WEIGHTS[:16] = 0.25
_DN_WEIGHTS[4080:] = 0.25
_DN_WEIGHTS[0] = 0.0
_DN_WEIGHTS[DN_MAX] = 0.0


@dataclass(frozen=True)
class Crf:
    """Camera response as an inverse lookup table over all 4096 DN."""

    inverse: np.ndarray

    def __post_init__(self) -> None:
        table = np.asarray(self.inverse, dtype=np.float64).reshape(TABLE_SIZE).copy()
        if not np.all(np.diff(table) > 0.0):
            raise ValueError("inverse table must be strictly increasing")
        if table[0] != 0.0 or table[-1] != 1.0:
            raise ValueError("inverse table endpoints must be exactly 0 and 1")
        table.setflags(write=False)
        object.__setattr__(self, "inverse", table)

    @classmethod
    def identity(cls) -> "Crf":
        return cls(np.arange(TABLE_SIZE, dtype=np.float64) / DN_MAX)

    @classmethod
    def from_gamma(cls, gamma: float) -> "Crf":
        """Power-law response DN = round(4095 * e**(1/gamma)); inverse (d/4095)**gamma."""
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        return cls((np.arange(TABLE_SIZE, dtype=np.float64) / DN_MAX) ** gamma)


def invert(crf: Crf, dn: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
    """Normalized irradiance-exposure for a DN value (scalar or array)."""
    if np.isscalar(dn):
        return float(crf.inverse[int(dn)])
    return crf.inverse[np.asarray(dn)]


def apply_forward(crf: Crf, e: Union[float, np.ndarray]) -> Union[int, np.ndarray]:
    """Largest DN whose table entry does not exceed clamp(e, 0, 1).

    This is the exact inverse of ``invert``: apply_forward(invert(d)) == d.
    """
    clamped = np.clip(e, 0.0, 1.0)
    dn = np.searchsorted(crf.inverse, clamped, side="right") - 1
    if np.isscalar(e):
        return int(dn)
    return dn


@dataclass(frozen=True)
class NoiseProfile:
    """Per-exposure RMSE noise in DN, interpolated linearly in log-exposure."""

    exposures_ms: np.ndarray
    rmse_dn: np.ndarray

    def __post_init__(self) -> None:
        exp = np.asarray(self.exposures_ms, dtype=np.float64).reshape(-1).copy()
        rmse = np.asarray(self.rmse_dn, dtype=np.float64).reshape(-1).copy()
        if exp.size == 0 or exp.size != rmse.size:
            raise ValueError("profile needs matching, non-empty exposure and rmse arrays")
        if exp[0] <= 0 or np.any(np.diff(exp) <= 0):
            raise ValueError("exposures must be positive and strictly increasing")
        if np.any(rmse < 0):
            raise ValueError("rmse values must be >= 0")
        exp.setflags(write=False)
        rmse.setflags(write=False)
        object.__setattr__(self, "exposures_ms", exp)
        object.__setattr__(self, "rmse_dn", rmse)

    @classmethod
    def zero(cls) -> "NoiseProfile":
        return cls(np.array([1.0]), np.array([0.0]))

    def rmse_at(self, exposure_ms: float) -> float:
        """Interpolated noise RMSE at an exposure; clamps outside the sampled range."""
        if exposure_ms <= 0:
            raise ValueError("exposure must be positive")
        return float(
            np.interp(np.log(exposure_ms), np.log(self.exposures_ms), self.rmse_dn)
        )


def estimate_noise(
    repeats: Sequence[Tuple[float, Sequence[Image12]]]
) -> NoiseProfile:
    """Noise RMSE per exposure from repeated captures of a static scene.

    For each exposure, the RMSE is the root-mean-square deviation of every
    image from the per-pixel mean of its repeat group.
    """
    if not repeats:
        raise ValueError("at least one exposure group required")
    samples = []
    for exposure, images in repeats:
        if len(images) < 2:
            raise ValueError("each exposure needs >= 2 repeat images")
        if len({im.shape for im in images}) != 1:
            raise DimensionMismatch("repeat images must share dimensions")
        stack = np.stack([im.data for im in images]).astype(np.float64)
        rmse = float(np.sqrt(np.mean((stack - stack.mean(axis=0)) ** 2)))
        samples.append((float(exposure), rmse))
    samples.sort()
    exposures = [e for e, _ in samples]
    if len(set(exposures)) != len(exposures):
        raise ValueError("duplicate exposure in repeat groups")
    return NoiseProfile(np.array(exposures), np.array([r for _, r in samples]))


def _isotonic_nondecreasing(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted least-squares non-decreasing fit (pool adjacent violators)."""
    level: List[float] = []
    weight: List[float] = []
    count: List[int] = []
    for v, w in zip(values, weights):
        level.append(float(v))
        weight.append(float(w))
        count.append(1)
        while len(level) > 1 and level[-2] > level[-1]:
            w_sum = weight[-2] + weight[-1]
            merged = (
                (level[-2] * weight[-2] + level[-1] * weight[-1]) / w_sum
                if w_sum > 0
                else 0.5 * (level[-2] + level[-1])
            )
            n = count.pop()
            level.pop()
            weight.pop()
            level[-1] = merged
            weight[-1] = w_sum
            count[-1] += n
    return np.repeat(level, count)


def _power_law_init(dn: np.ndarray, exposures: np.ndarray) -> np.ndarray:
    """Seed table from the best-fit power-law response.

    For a response f(e) = e^(1/g), the log-DN shift between two brackets of
    the same pixel is ln(ratio)/g, a constant. The median shift over all
    well-exposed bracket pairs therefore pins the exponent in one pass. The
    alternation that follows only has to correct local shape, which it does
    quickly; started from a linear table instead, a strongly curved response
    emerges one exposure rung per iteration and needs hundreds of rounds.
    """
    n = len(exposures)
    samples = []
    for i in range(n):
        for j in range(i + 1, n):
            ok = (dn[i] >= 64) & (dn[i] <= 4031) & (dn[j] >= 64) & (dn[j] <= 4031)
            if ok.sum() < 32:
                continue
            shift = np.log(dn[j][ok] / dn[i][ok].astype(np.float64))
            samples.append(shift / np.log(exposures[j] / exposures[i]))
    u = np.arange(TABLE_SIZE, dtype=np.float64) / DN_MAX
    if not samples:
        return u
    inv_gamma = float(np.median(np.concatenate(samples)))
    gamma = 1.0 / float(np.clip(inv_gamma, 0.2, 5.0))
    return u ** float(np.clip(gamma, 0.2, 5.0))


def _end_slope(observed: np.ndarray, values: np.ndarray, take: int = 64) -> float:
    """Least-squares slope over up to `take` end bins.

    A two-point slope is dominated by per-bin noise; extrapolating dozens of
    bins with it (and normalizing by the result) would randomly rescale the
    whole table every iteration.
    """
    take = min(take, observed.size)
    xs = observed[-take:].astype(np.float64)
    ys = values[observed[-take:]]
    if take < 2 or xs[-1] == xs[0]:
        return 0.0
    slope = float(np.polyfit(xs, ys, 1)[0])
    return max(slope, 0.0)


def _fill_unobserved(table: np.ndarray) -> np.ndarray:
    """Linear interpolation over DN for bins without observations.

    Bins below the first observation ramp linearly from zero: the inverse
    table is anchored at ``inverse[0] = 0``, and a fitted slope there can
    undershoot zero, which the later endpoint shift would smear across the
    whole table. The unobserved tail is extrapolated with a least-squares
    end slope.
    """
    observed = np.flatnonzero(np.isfinite(table))
    if observed.size < 2:
        raise ValueError("too few distinct DN observed to fit a response")
    idx = np.arange(table.size, dtype=np.float64)
    filled = np.interp(idx, observed.astype(np.float64), table[observed])
    first, last = observed[0], observed[-1]
    if first > 0:
        filled[:first] = max(table[first], 0.0) * idx[:first] / first
    if last < table.size - 1:
        slope = _end_slope(observed, table)
        filled[last + 1 :] = table[last] + slope * (idx[last + 1 :] - last)
    return filled


def _normalize_strict(table: np.ndarray) -> np.ndarray:
    """Pin endpoints to [0, 1] and enforce strict monotonicity."""
    table = np.maximum.accumulate(table)
    # A vanishing ramp keeps flat stretches strictly increasing without
    # disturbing the fit.
    table = table + np.linspace(0.0, 1e-9, table.size)
    table = table - table[0]
    if table[-1] <= 0:
        raise ValueError("degenerate response fit")
    table = table / table[-1]
    table[0] = 0.0
    table[-1] = 1.0
    return table


def estimate_crf(
    stack: Sequence[Tuple[Image12, float]],
    max_iterations: int = 50,
    rel_tol: float = 1e-6,
    max_residual_dn: float = 50.0,
) -> Crf:
    """Fit the response table from a static multi-exposure stack.

    Alternates two closed-form least-squares steps until the photometric
    consistency energy stops improving:

    1. per-pixel irradiance: the weighted mean over brackets of
       ``inverse[DN_i(x)] / exposure_i``, with weights ``w(DN) * exposure^2``
    2. per-DN response: the weighted mean of ``exposure_i * E(x)`` over all
       observations that produced that DN, with weights ``w(DN)``

    This weight pairing makes both steps exact coordinate descent on
    ``sum w * (inverse[DN] - exposure * E)^2``, so the energy never
    increases. An unweighted ratio mean would let the large relative
    rounding error of low DN propagate into high bins multiplied by the
    exposure ratio, and the iteration drifts instead of converging.

    The table starts at the best-fit power law (see ``_power_law_init``) so
    the iteration budget is spent on local refinement rather than on slowly
    bending a linear table into a curved response.

    Monotonicity is restored by isotonic projection each iteration and the
    table is renormalized to endpoints 0 and 1. Saturated DN are excluded
    from both steps; near-saturated DN are down-weighted.

    Raises NonStaticStack when the refit residual exceeds ``max_residual_dn``,
    which is the signature of scene motion between brackets.
    """
    if len(stack) < 3:
        raise InsufficientExposureSpan("need at least 3 images")
    exposures = np.array([float(t) for _, t in stack])
    if np.any(exposures <= 0):
        raise ValueError("exposures must be positive")
    if exposures.max() / exposures.min() < 4.0:
        raise InsufficientExposureSpan("exposures must span at least 2 octaves")
    if len({im.shape for im, _ in stack}) != 1:
        raise DimensionMismatch("stack images must share dimensions")

    dn = np.stack([im.data for im, _ in stack]).reshape(len(stack), -1).astype(np.int64)
    weights = _DN_WEIGHTS[dn]
    obs_weight_total = weights.sum()
    if obs_weight_total <= 0:
        raise ValueError("stack is fully saturated")

    table = _power_law_init(dn, exposures)
    ratio_weights = weights * exposures[:, None] ** 2
    pixel_weight = ratio_weights.sum(axis=0)
    usable = pixel_weight > 0
    flat_dn = dn.ravel()
    flat_w = weights.ravel()
    prev_energy = None

    for _ in range(max_iterations):
        # Irradiance step: each bracket votes with its exposure-normalized
        # table value; saturated observations are silent.
        ratios = table[dn] / exposures[:, None]
        irradiance = np.zeros(dn.shape[1])
        irradiance[usable] = (ratio_weights * ratios).sum(axis=0)[usable] / pixel_weight[usable]

        # Response step: per-DN weighted mean of exposure * irradiance.
        target = exposures[:, None] * irradiance[None, :]
        num = np.bincount(flat_dn, weights=(weights * target).ravel(), minlength=TABLE_SIZE)
        den = np.bincount(flat_dn, weights=flat_w, minlength=TABLE_SIZE)
        fitted = np.full(TABLE_SIZE, np.nan)
        has_data = den > 0
        fitted[has_data] = num[has_data] / den[has_data]
        fitted = _fill_unobserved(fitted)
        # Gap-filled bins get a token weight so they cannot drag the isotonic fit.
        iso_weights = np.where(has_data, den, 1e-9)
        fitted = _isotonic_nondecreasing(fitted, iso_weights)
        table = _normalize_strict(fitted)

        residual = table[dn] - target
        energy = float((weights * residual**2).sum() / obs_weight_total)
        if prev_energy is not None and abs(prev_energy - energy) <= rel_tol * max(prev_energy, 1e-30):
            break
        prev_energy = energy

    crf = Crf(table)

    # Refit check in DN units: a static stack reproduces itself to within a
    # few DN; scene motion between brackets blows this up.
    ratios = table[dn] / exposures[:, None]
    irradiance = np.zeros(dn.shape[1])
    irradiance[usable] = (ratio_weights * ratios).sum(axis=0)[usable] / pixel_weight[usable]
    predicted = apply_forward(crf, exposures[:, None] * irradiance[None, :])
    residual_dn = np.sqrt(
        float((weights * (predicted - dn) ** 2).sum() / obs_weight_total)
    )
    if residual_dn > max_residual_dn:
        raise NonStaticStack(
            f"refit residual {residual_dn:.1f} DN exceeds {max_residual_dn:.1f} DN; "
            "the stack does not look static"
        )
    return crf


def refit_residual_dn(crf: Crf, stack: Sequence[Tuple[Image12, float]]) -> float:
    """Weighted RMSE (DN) of re-projecting a stack through a response table."""
    exposures = np.array([float(t) for _, t in stack])
    dn = np.stack([im.data for im, _ in stack]).reshape(len(stack), -1).astype(np.int64)
    weights = _DN_WEIGHTS[dn]
    total = weights.sum()
    if total <= 0:
        raise ValueError("stack is fully saturated")
    ratio_weights = weights * exposures[:, None] ** 2
    pixel_weight = ratio_weights.sum(axis=0)
    usable = pixel_weight > 0
    ratios = crf.inverse[dn] / exposures[:, None]
    irradiance = np.zeros(dn.shape[1])
    irradiance[usable] = (ratio_weights * ratios).sum(axis=0)[usable] / pixel_weight[usable]
    predicted = apply_forward(crf, exposures[:, None] * irradiance[None, :])
    return float(np.sqrt((weights * (predicted - dn) ** 2).sum() / total))


def save_crf(crf: Crf, path: Union[str, os.PathLike]) -> None:
    """Write the response table as text: header line then 4096 floats."""
    lines = [f"crf v1 {TABLE_SIZE}"]
    lines.extend(repr(float(v)) for v in crf.inverse)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_crf(path: Union[str, os.PathLike]) -> Crf:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != f"crf v1 {TABLE_SIZE}":
        raise ParseError(f"{path}: expected header 'crf v1 {TABLE_SIZE}'")
    if len(lines) != TABLE_SIZE + 1:
        raise ParseError(f"{path}: expected {TABLE_SIZE} table entries, got {len(lines) - 1}")
    try:
        table = np.array([float(v) for v in lines[1:]])
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        return Crf(table)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_noise_profile(profile: NoiseProfile, path: Union[str, os.PathLike]) -> None:
    rows = ["exposure_ms,rmse_dn"]
    rows.extend(
        f"{float(e)!r},{float(r)!r}"
        for e, r in zip(profile.exposures_ms, profile.rmse_dn)
    )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(rows) + "\n")


def load_noise_profile(path: Union[str, os.PathLike]) -> NoiseProfile:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "exposure_ms,rmse_dn":
        raise ParseError(f"{path}: expected header 'exposure_ms,rmse_dn'")
    exposures = []
    rmses = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise ParseError(f"{path}: bad row {ln!r}")
        try:
            exposures.append(float(parts[0]))
            rmses.append(float(parts[1]))
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    try:
        return NoiseProfile(np.array(exposures), np.array(rmses))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
