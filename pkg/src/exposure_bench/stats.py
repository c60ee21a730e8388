"""Two-stage Mann-Whitney U comparisons with Bonferroni correction.

Stage 1 asks whether a method differs from the reference at all (two-sided);
only then does stage 2 ask whether it differs in the better direction.
P-values are exact by enumeration for small samples and a tie-corrected
normal approximation otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import EmptyInput

EXACT_MAX_PAIRS = 400
VERDICT_LABELS = ("Better", "Worse", "Equivalent")


@dataclass(frozen=True)
class SampleSet:
    """Per-trajectory means of one metric for one method."""

    method: str
    metric: str
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1).copy()
        if len(vals) == 0:
            raise EmptyInput(f"no samples for {self.method}/{self.metric}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("sample values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Verdict:
    label: str
    u_statistic: float
    p_two_sided: float
    p_one_sided: float
    corrected_beta: float

    def __post_init__(self) -> None:
        if self.label not in VERDICT_LABELS:
            raise ValueError(f"unknown verdict label {self.label!r}")


def _values(sample) -> np.ndarray:
    arr = np.asarray(getattr(sample, "values", sample), dtype=np.float64).reshape(-1)
    if len(arr) == 0:
        raise EmptyInput("empty sample")
    return arr


def _midranks(pooled: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their rank span."""
    order = np.argsort(pooled, kind="mergesort")
    sorted_vals = pooled[order]
    boundaries = np.flatnonzero(np.diff(sorted_vals) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(pooled)]])
    ranks = np.empty(len(pooled))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def _exact_u_counts(n1: int, n2: int) -> np.ndarray:
    """counts[u] = orderings of n1+n2 distinct values with U statistic u.

    Recurrence over whether the largest value belongs to the first sample:
    f(n1, n2, u) = f(n1-1, n2, u-n2) + f(n1, n2-1, u). Counts stay below
    2**53 for n1*n2 <= 400, so float64 arithmetic is exact.
    """
    max_u = n1 * n2
    row = [np.zeros(max_u + 1) for _ in range(n2 + 1)]
    for arr in row:
        arr[0] = 1.0
    for _ in range(n1):
        new_row: list[np.ndarray] = []
        for j in range(n2 + 1):
            arr = np.zeros(max_u + 1)
            arr[j:] = row[j][: max_u + 1 - j]
            if j > 0:
                arr += new_row[j - 1]
            new_row.append(arr)
        row = new_row
    return row[n2]


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(x, y, alternative: str = "two-sided") -> Tuple[float, float]:
    """U statistic of x versus y and its p-value.

    "greater" tests whether x tends to exceed y. Exact enumeration is used
    for untied samples with n_x*n_y <= 400; otherwise a normal approximation
    with tie-corrected variance and 0.5 continuity correction. Samples whose
    pooled values are all identical carry no information: p = 1.
    """
    if alternative not in ("two-sided", "greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    xv = _values(x)
    yv = _values(y)
    n1, n2 = len(xv), len(yv)
    pooled = np.concatenate([xv, yv])
    ranks = _midranks(pooled)
    u_x = float(np.sum(ranks[:n1]) - n1 * (n1 + 1) / 2.0)

    _, tie_counts = np.unique(pooled, return_counts=True)
    if len(tie_counts) == 1:
        return u_x, 1.0  # degenerate: every pooled value identical
    untied = len(tie_counts) == n1 + n2

    if untied and n1 * n2 <= EXACT_MAX_PAIRS:
        counts = _exact_u_counts(n1, n2)
        total = counts.sum()
        u_int = int(round(u_x))
        p_greater = counts[u_int:].sum() / total
        p_less = counts[: u_int + 1].sum() / total
        if alternative == "greater":
            return u_x, float(p_greater)
        return u_x, float(min(1.0, 2.0 * min(p_less, p_greater)))

    n = n1 + n2
    mu = n1 * n2 / 2.0
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return u_x, 1.0
    sd = math.sqrt(var)
    if alternative == "greater":
        return u_x, min(1.0, _normal_sf((u_x - mu - 0.5) / sd))
    return u_x, min(1.0, 2.0 * _normal_sf((abs(u_x - mu) - 0.5) / sd))


def bonferroni(beta: float, n_test: int) -> float:
    """Corrected per-comparison significance level beta / n_test."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    if int(n_test) != n_test or n_test < 1:
        raise ValueError("n_test must be a positive integer")
    return float(beta) / int(n_test)


def verdict(
    test_method: SampleSet,
    reference: SampleSet,
    beta: float = 0.05,
    n_test: int = 1,
    higher_is_better: bool = True,
) -> Verdict:
    """Two-stage comparison of a method against the reference.

    Stage 1: two-sided test at the corrected level; no rejection means the
    method is statistically equivalent. Stage 2: one-sided test in the
    favourable direction; rejection means better, failure to reject means
    the difference found in stage 1 is in the unfavourable direction.
    """
    if test_method.metric != reference.metric:
        raise ValueError(
            f"metric mismatch: {test_method.metric!r} vs {reference.metric!r}"
        )
    level = bonferroni(beta, n_test)
    u_two, p_two = mann_whitney_u(test_method, reference, "two-sided")
    if higher_is_better:
        _, p_one = mann_whitney_u(test_method, reference, "greater")
    else:
        _, p_one = mann_whitney_u(reference, test_method, "greater")
    if p_two >= level:
        label = "Equivalent"
    elif p_one < level:
        label = "Better"
    else:
        label = "Worse"
    return Verdict(label, u_two, p_two, p_one, level)
