"""Windowed relative trajectory errors, time before failure, and success.

Estimated and reference trajectories are time-associated by nearest
timestamp, then the reference is cut into consecutive non-overlapping
segments of a given arc length. Per segment, the discrepancy between the
reference and estimated relative motions scores translation (percent of the
window) and rotation (degrees per meter).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import EmptyInput, NoOverlap, TrajectoryTooShort

DEFAULT_ASSOCIATION_TOL_S = 0.15
DEFAULT_FAILURE_WINDOW_M = 5.0
DEFAULT_FAILURE_THRESHOLD_PERCENT = 100.0


@dataclass(frozen=True)
class Trajectory:
    """Timestamped poses: translations in meters, unit quaternions (qx, qy, qz, qw)."""

    timestamps: np.ndarray  # (n,)
    translations: np.ndarray  # (n, 3)
    quaternions: np.ndarray  # (n, 4)

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1).copy()
        tr = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3).copy()
        qs = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4).copy()
        if not (len(ts) == len(tr) == len(qs)):
            raise ValueError("timestamps, translations, quaternions must align")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        norms = np.linalg.norm(qs, axis=1)
        if len(qs) and np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("quaternions must be unit norm within 1e-6")
        for arr in (ts, tr, qs):
            arr.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "translations", tr)
        object.__setattr__(self, "quaternions", qs)

    @classmethod
    def empty(cls) -> "Trajectory":
        return cls(np.empty(0), np.empty((0, 3)), np.empty((0, 4)))

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class MetricConfig:
    """Evaluation windows (meters) and the time-association tolerance."""

    windows_m: Tuple[float, ...] = tuple(float(w) for w in range(5, 51))
    association_tol_s: float = DEFAULT_ASSOCIATION_TOL_S

    def __post_init__(self) -> None:
        w = tuple(float(x) for x in self.windows_m)
        if not w or w[0] <= 0 or any(b <= a for a, b in zip(w, w[1:])):
            raise ValueError("windows must be positive and strictly increasing")
        object.__setattr__(self, "windows_m", w)


@dataclass(frozen=True)
class RelativeErrorResult:
    """Aggregate errors plus the per-window breakdown they came from."""

    rte_percent: float
    rre_deg_per_m: float
    per_window: Tuple[Tuple[float, float, float], ...]  # (window_m, rte, rre)


def quaternion_to_rotation(q: Sequence[float]) -> np.ndarray:
    """3x3 rotation matrix from a unit quaternion (qx, qy, qz, qw)."""
    x, y, z, w = (float(v) for v in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_angle_deg(rot: np.ndarray) -> float:
    """Geodesic rotation angle of a rotation matrix, in degrees."""
    cos_angle = (float(np.trace(rot)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))


def associate(
    est: Trajectory, ref: Trajectory, tol_s: float = DEFAULT_ASSOCIATION_TOL_S
) -> Tuple[np.ndarray, np.ndarray]:
    """Indices (ref_idx, est_idx) of nearest-timestamp pairs within tolerance."""
    if len(est) == 0 or len(ref) == 0:
        raise NoOverlap("empty trajectory")
    pos = np.searchsorted(est.timestamps, ref.timestamps)
    left = np.clip(pos - 1, 0, len(est) - 1)
    right = np.clip(pos, 0, len(est) - 1)
    pick = np.where(
        np.abs(est.timestamps[left] - ref.timestamps)
        <= np.abs(est.timestamps[right] - ref.timestamps),
        left,
        right,
    )
    ok = np.abs(est.timestamps[pick] - ref.timestamps) <= tol_s
    if not ok.any():
        raise NoOverlap("no pose pairs within the association tolerance")
    return np.flatnonzero(ok), pick[ok]


def _relative(rot_a, t_a, rot_b, t_b) -> Tuple[np.ndarray, np.ndarray]:
    """Relative motion from pose a to pose b: inv(T_a) @ T_b."""
    rel_rot = rot_a.T @ rot_b
    rel_t = rot_a.T @ (t_b - t_a)
    return rel_rot, rel_t


def _segments(cum_dist: np.ndarray, window_m: float) -> List[Tuple[int, int]]:
    """Non-overlapping index spans each covering at least window_m of arc."""
    spans = []
    start = 0
    n = len(cum_dist)
    while start < n - 1:
        target = cum_dist[start] + window_m
        end = int(np.searchsorted(cum_dist, target - 1e-12))
        if end >= n:
            break  # trailing arc shorter than the window: dropped
        spans.append((start, end))
        start = end
    return spans


def _segment_errors(
    est: Trajectory, ref: Trajectory, window_m: float, tol_s: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-segment translation (m) and rotation (deg) discrepancies."""
    if window_m <= 0:
        raise ValueError("window must be positive")
    ref_idx, est_idx = associate(est, ref, tol_s)
    ref_t = ref.translations[ref_idx]
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ref_t, axis=0), axis=1))])
    if cum[-1] < window_m:
        raise TrajectoryTooShort(
            f"reference covers {cum[-1]:.2f} m, below the {window_m:.2f} m window"
        )
    ref_rots = [quaternion_to_rotation(q) for q in ref.quaternions[ref_idx]]
    est_rots = [quaternion_to_rotation(q) for q in est.quaternions[est_idx]]
    est_t = est.translations[est_idx]
    trans_err = []
    rot_err = []
    for i, j in _segments(cum, window_m):
        ref_rel_rot, ref_rel_t = _relative(ref_rots[i], ref_t[i], ref_rots[j], ref_t[j])
        est_rel_rot, est_rel_t = _relative(est_rots[i], est_t[i], est_rots[j], est_t[j])
        # discrepancy: inv(ref_rel) @ est_rel
        d_rot = ref_rel_rot.T @ est_rel_rot
        d_t = ref_rel_rot.T @ (est_rel_t - ref_rel_t)
        trans_err.append(float(np.linalg.norm(d_t)))
        rot_err.append(rotation_angle_deg(d_rot))
    if not trans_err:
        raise TrajectoryTooShort("no complete segment at this window")
    return np.array(trans_err), np.array(rot_err)


def rte(
    est: Trajectory,
    ref: Trajectory,
    window_m: float,
    association_tol_s: float = DEFAULT_ASSOCIATION_TOL_S,
) -> float:
    """Relative translation error over one window, in percent of the window."""
    trans_err, _ = _segment_errors(est, ref, window_m, association_tol_s)
    return float(np.sqrt(np.mean((trans_err / window_m * 100.0) ** 2)))


def rre(
    est: Trajectory,
    ref: Trajectory,
    window_m: float,
    association_tol_s: float = DEFAULT_ASSOCIATION_TOL_S,
) -> float:
    """Relative rotation error over one window, in degrees per meter."""
    _, rot_err = _segment_errors(est, ref, window_m, association_tol_s)
    return float(np.sqrt(np.mean((rot_err / window_m) ** 2)))


def aggregate(
    rte_values: Iterable[float], rre_values: Iterable[float]
) -> Tuple[float, float]:
    """Arithmetic mean over all (trajectory, window) values of each error."""
    rte_list = [float(v) for v in rte_values]
    rre_list = [float(v) for v in rre_values]
    if not rte_list or not rre_list:
        raise EmptyInput("nothing to aggregate")
    return float(np.mean(rte_list)), float(np.mean(rre_list))


def relative_errors(
    est: Trajectory, ref: Trajectory, cfg: MetricConfig = MetricConfig()
) -> RelativeErrorResult:
    """All-window evaluation with the aggregate means."""
    per_window = []
    for w in cfg.windows_m:
        trans_err, rot_err = _segment_errors(est, ref, w, cfg.association_tol_s)
        per_window.append(
            (
                w,
                float(np.sqrt(np.mean((trans_err / w * 100.0) ** 2))),
                float(np.sqrt(np.mean((rot_err / w) ** 2))),
            )
        )
    rte_mean, rre_mean = aggregate(
        [row[1] for row in per_window], [row[2] for row in per_window]
    )
    return RelativeErrorResult(rte_mean, rre_mean, tuple(per_window))


def time_before_failure(
    est: Trajectory,
    ref: Trajectory,
    full_duration_s: float,
    failure_threshold_percent: float = DEFAULT_FAILURE_THRESHOLD_PERCENT,
    failure_window_m: float = DEFAULT_FAILURE_WINDOW_M,
    association_tol_s: float = DEFAULT_ASSOCIATION_TOL_S,
) -> float:
    """Seconds until the estimate diverges or stops while the reference continues.

    Divergence is a local translation error over the trailing arc window
    exceeding the threshold. An estimate whose last pose precedes the
    reference's end (beyond the association tolerance) fails at its last
    timestamp. Otherwise the full duration is returned.
    """
    if len(est) == 0:
        return 0.0
    if len(ref) == 0:
        return float(full_duration_s)
    try:
        ref_idx, est_idx = associate(est, ref, association_tol_s)
    except NoOverlap:
        return 0.0
    ref_t = ref.translations[ref_idx]
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ref_t, axis=0), axis=1))])
    ref_rots = [quaternion_to_rotation(q) for q in ref.quaternions[ref_idx]]
    est_rots = [quaternion_to_rotation(q) for q in est.quaternions[est_idx]]
    est_t = est.translations[est_idx]
    for j in range(len(ref_idx)):
        if cum[j] < failure_window_m:
            continue  # not enough trailing arc yet
        i = int(np.searchsorted(cum, cum[j] - failure_window_m, side="left"))
        ref_rel_rot, ref_rel_t = _relative(ref_rots[i], ref_t[i], ref_rots[j], ref_t[j])
        _, est_rel_t = _relative(est_rots[i], est_t[i], est_rots[j], est_t[j])
        err_m = float(np.linalg.norm(ref_rel_rot.T @ (est_rel_t - ref_rel_t)))
        if err_m / failure_window_m * 100.0 > failure_threshold_percent:
            return float(est.timestamps[est_idx[j]])
    if ref.timestamps[-1] - est.timestamps[-1] > association_tol_s:
        return float(est.timestamps[-1])
    return float(full_duration_s)


def is_success(failure_time_s: float, full_duration_s: float) -> bool:
    """A run succeeds when it never failed before the sequence ended."""
    return failure_time_s >= full_duration_s
