"""Closed-loop benchmark orchestration.

For each (method, sequence) pair, a fresh controller is driven against the
emulator frame by frame: emulate at the current request, score the image,
then step the controller for the next frame. Per-pair records aggregate into
metric sample sets and the verdict table against the reference method.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .controllers import ControllerConfig, ExposureController, make_controller
from .core import BracketSequence, mean_brightness, saturation_level
from .emulator import EmulatorConfig, emulate
from .errors import ControllerFault, NoOverlap, TrajectoryTooShort
from .features import DEFAULT_MAX_FEATURES, detect, feature_reward, grid_coverage, match
from .stats import SampleSet, Verdict, verdict
from .trajectory import (
    MetricConfig,
    Trajectory,
    is_success,
    relative_errors,
    time_before_failure,
)

TRACE_HEADER = "timestamp,exposure_ms,brightness,saturation,features,matches,coverage,reward"
METRIC_ORDER = ("coverage", "matches", "rte", "rre", "failure_time")
# Direction of improvement per metric: True when larger values are better.
METRIC_HIGHER_IS_BETTER = {
    "coverage": True,
    "matches": True,
    "rte": False,
    "rre": False,
    "failure_time": True,
}
VERDICT_SYMBOLS = {"Better": "▲", "Worse": "▼", "Equivalent": "≡"}
DEFAULT_REFERENCE = "ae50"
_WORKERS_ENV = "EXPOSURE_BENCH_WORKERS"


@dataclass(frozen=True)
class TraceRow:
    """One frame of a closed-loop run."""

    timestamp: float
    exposure_ms: float
    brightness: float
    saturation: float
    features: int
    matches: int
    coverage: float
    reward: float

    def as_csv(self) -> str:
        return ",".join(
            [
                repr(float(self.timestamp)),
                repr(float(self.exposure_ms)),
                repr(float(self.brightness)),
                repr(float(self.saturation)),
                str(int(self.features)),
                str(int(self.matches)),
                repr(float(self.coverage)),
                repr(float(self.reward)),
            ]
        )


@dataclass(frozen=True)
class RunRecord:
    """Everything one (method, sequence) pair produced."""

    method: str
    sequence: str
    rows: Tuple[TraceRow, ...]
    fault: bool = False
    fault_message: str = ""
    failure_time_s: float = 0.0
    full_duration_s: float = 0.0
    success: bool = True

    def _mean(self, attr: str) -> float:
        if not self.rows:
            return 0.0
        return float(sum(getattr(r, attr) for r in self.rows)) / len(self.rows)

    @property
    def mean_coverage(self) -> float:
        return self._mean("coverage")

    @property
    def mean_matches(self) -> float:
        return self._mean("matches")


@dataclass(frozen=True)
class VerdictRow:
    method: str
    metric: str
    result: Verdict


@dataclass(frozen=True)
class BenchmarkReport:
    records: Tuple[RunRecord, ...]
    metric_rows: Tuple[Tuple[str, str, str, float], ...]  # method, sequence, metric, value
    sample_sets: Tuple[SampleSet, ...]
    verdicts: Tuple[VerdictRow, ...]
    reference: str
    beta: float


@dataclass(frozen=True)
class BenchmarkConfig:
    emulator: EmulatorConfig
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    reference: str = DEFAULT_REFERENCE
    beta: float = 0.05
    max_features: int = DEFAULT_MAX_FEATURES
    grid_n: int = 20
    metric_cfg: MetricConfig = field(default_factory=MetricConfig)
    workers: Optional[int] = None
    dump_dir: Optional[Path] = None


def run_sequence(
    seq: BracketSequence,
    controller: ExposureController,
    emulator_cfg: EmulatorConfig,
    max_features: int = DEFAULT_MAX_FEATURES,
    grid_n: int = 20,
    dump_dir: Optional[Path] = None,
) -> RunRecord:
    """Drive one controller through one sequence.

    A ControllerFault truncates the trace at the faulting frame and marks the
    record failed; every other frame keeps the metrics-then-step order.
    """
    full_duration = seq.frames[-1].timestamp if seq.frames else 0.0
    if not seq.frames:
        return RunRecord(controller.name, seq.id, (), full_duration_s=0.0)
    rows: List[TraceRow] = []
    fault = False
    fault_message = ""
    failure_time = full_duration
    request = controller.initialize(seq.frames[0], emulator_cfg)
    prev_features = None
    for i, frame in enumerate(seq.frames):
        image = emulate(frame, request, emulator_cfg)
        if dump_dir is not None:
            from .dataset_io import save_image12

            save_image12(image, Path(dump_dir) / f"{i:06d}.png")
        fs = detect(image, max_features=max_features)
        n_matches = match(prev_features, fs) if prev_features is not None else 0
        rows.append(
            TraceRow(
                timestamp=frame.timestamp,
                exposure_ms=request,
                brightness=mean_brightness(image),
                saturation=saturation_level(image),
                features=len(fs),
                matches=n_matches,
                coverage=grid_coverage(fs, image.shape, n=grid_n),
                reward=feature_reward(fs, n_matches),
            )
        )
        prev_features = fs
        try:
            request = controller.step(image)
        except ControllerFault as exc:
            fault = True
            fault_message = str(exc)
            failure_time = frame.timestamp
            break
    return RunRecord(
        method=controller.name,
        sequence=seq.id,
        rows=tuple(rows),
        fault=fault,
        fault_message=fault_message,
        failure_time_s=failure_time,
        full_duration_s=full_duration,
        success=not fault and is_success(failure_time, full_duration),
    )


def _resolve_workers(requested: Optional[int], n_pairs: int) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(_WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, min(4, n_pairs))


def _run_pair(
    method_spec: str, seq: BracketSequence, cfg: BenchmarkConfig
) -> RunRecord:
    controller = make_controller(method_spec, cfg.controller)
    dump = (
        Path(cfg.dump_dir) / controller.name / seq.id if cfg.dump_dir is not None else None
    )
    try:
        return run_sequence(
            seq,
            controller,
            cfg.emulator,
            max_features=cfg.max_features,
            grid_n=cfg.grid_n,
            dump_dir=dump,
        )
    finally:
        controller.close()


def _reference_trajectories(
    sequences: Sequence[BracketSequence],
    overrides: Optional[Mapping[str, Trajectory]],
) -> Dict[str, Trajectory]:
    from .dataset_io import trajectory_from_sequence

    refs: Dict[str, Trajectory] = dict(overrides or {})
    for seq in sequences:
        if seq.id not in refs and seq.frames and all(
            f.pose is not None for f in seq.frames
        ):
            refs[seq.id] = trajectory_from_sequence(seq)
    return refs


def run_benchmark(
    sequences: Sequence[BracketSequence],
    methods: Sequence[str],
    cfg: BenchmarkConfig,
    est_trajectories: Optional[Mapping[Tuple[str, str], Trajectory]] = None,
    ref_trajectories: Optional[Mapping[str, Trajectory]] = None,
) -> BenchmarkReport:
    """All (method, sequence) pairs, aggregated into the verdict report.

    Estimated trajectories (keyed by (method name, sequence id)) unlock the
    rte/rre metrics and the trajectory-based failure time; without them only
    the photometric metrics are reported. Pair failures are recorded, never
    raised.
    """
    if not sequences:
        raise ValueError("no sequences to run")
    if not methods:
        raise ValueError("no methods to run")
    names = [make_controller(m, cfg.controller).name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate method names: {names}")
    if len(names) >= 2 and cfg.reference not in names:
        raise ValueError(f"reference method {cfg.reference!r} not among {names}")
    seq_ids = [s.id for s in sequences]
    if len(set(seq_ids)) != len(seq_ids):
        raise ValueError(f"duplicate sequence ids: {seq_ids}")

    pairs = [(spec, name, seq) for spec, name in zip(methods, names) for seq in sequences]
    workers = _resolve_workers(cfg.workers, len(pairs))
    records: Dict[Tuple[str, str], RunRecord] = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {
            (name, seq.id): pool.submit(_run_pair, spec, seq, cfg)
            for spec, name, seq in pairs
        }
        for (name, seq_id), fut in futures.items():
            try:
                records[(name, seq_id)] = fut.result()
            except Exception as exc:  # isolation: a bad pair never kills the batch
                records[(name, seq_id)] = RunRecord(
                    method=name,
                    sequence=seq_id,
                    rows=(),
                    fault=True,
                    fault_message=f"{type(exc).__name__}: {exc}",
                    failure_time_s=0.0,
                    full_duration_s=0.0,
                    success=False,
                )

    refs = _reference_trajectories(sequences, ref_trajectories)
    est = dict(est_trajectories or {})
    metric_rows: List[Tuple[str, str, str, float]] = []
    ordered_records: List[RunRecord] = []
    for name in names:
        for seq in sequences:
            rec = records[(name, seq.id)]
            values: Dict[str, float] = {
                "coverage": rec.mean_coverage,
                "matches": rec.mean_matches,
            }
            est_traj = est.get((name, seq.id))
            ref_traj = refs.get(seq.id)
            if est_traj is not None and ref_traj is not None:
                try:
                    result = relative_errors(est_traj, ref_traj, cfg.metric_cfg)
                    values["rte"] = result.rte_percent
                    values["rre"] = result.rre_deg_per_m
                except (TrajectoryTooShort, NoOverlap):
                    pass  # sequence too short for the windows: skip rte/rre only
                failure = time_before_failure(
                    est_traj,
                    ref_traj,
                    rec.full_duration_s,
                    association_tol_s=cfg.metric_cfg.association_tol_s,
                )
                failure = min(failure, rec.failure_time_s)
                rec = replace(
                    rec,
                    failure_time_s=failure,
                    success=not rec.fault and is_success(failure, rec.full_duration_s),
                )
            values["failure_time"] = rec.failure_time_s
            ordered_records.append(rec)
            for metric, value in values.items():
                metric_rows.append((name, seq.id, metric, float(value)))

    sample_sets = build_sample_sets(metric_rows)
    verdicts: Tuple[VerdictRow, ...] = ()
    if len(names) >= 2:
        verdicts = verdict_table(sample_sets, cfg.reference, cfg.beta)
    return BenchmarkReport(
        records=tuple(ordered_records),
        metric_rows=tuple(metric_rows),
        sample_sets=tuple(sample_sets),
        verdicts=verdicts,
        reference=cfg.reference,
        beta=cfg.beta,
    )


def build_sample_sets(
    metric_rows: Sequence[Tuple[str, str, str, float]]
) -> List[SampleSet]:
    """Group long-format metric rows into per-(method, metric) sample sets.

    Values keep the row order (sequence order), so sets built from the same
    rows are always comparable element-wise.
    """
    grouped: Dict[Tuple[str, str], List[float]] = {}
    for method, _seq, metric, value in metric_rows:
        grouped.setdefault((method, metric), []).append(float(value))
    return [
        SampleSet(method=m, metric=k, values=vals)
        for (m, k), vals in sorted(grouped.items())
    ]


def verdict_table(
    sample_sets: Sequence[SampleSet], reference: str, beta: float
) -> Tuple[VerdictRow, ...]:
    """Two-stage verdicts of every non-reference method against the reference.

    The Bonferroni n_test counts all non-reference methods, in both stages.
    """
    by_key = {(s.method, s.metric): s for s in sample_sets}
    methods = sorted({s.method for s in sample_sets})
    if reference not in methods:
        raise ValueError(f"reference method {reference!r} has no samples")
    others = [m for m in methods if m != reference]
    n_test = len(others)
    rows: List[VerdictRow] = []
    for m in others:
        for metric in METRIC_ORDER:
            test_set = by_key.get((m, metric))
            ref_set = by_key.get((reference, metric))
            if test_set is None or ref_set is None:
                continue
            rows.append(
                VerdictRow(
                    m,
                    metric,
                    verdict(
                        test_set,
                        ref_set,
                        beta=beta,
                        n_test=n_test,
                        higher_is_better=METRIC_HIGHER_IS_BETTER[metric],
                    ),
                )
            )
    return tuple(rows)


def write_metrics_csv(
    metric_rows: Sequence[Tuple[str, str, str, float]], path: Path
) -> None:
    """Long format, one row per (method, sequence, metric), sorted."""
    lines = ["method,sequence,metric,value"]
    for method, seq, metric, value in sorted(metric_rows):
        lines.append(f"{method},{seq},{metric},{repr(float(value))}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics_csv(path: Path) -> List[Tuple[str, str, str, float]]:
    from .errors import ParseError

    rows: List[Tuple[str, str, str, float]] = []
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != "method,sequence,metric,value":
        raise ParseError(f"{path}: expected header 'method,sequence,metric,value'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 fields")
        try:
            rows.append((parts[0], parts[1], parts[2], float(parts[3])))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return rows


def _verdict_sort_key(row: VerdictRow) -> Tuple[str, int]:
    return (row.method, METRIC_ORDER.index(row.metric))


def write_verdicts_csv(verdicts: Sequence[VerdictRow], path: Path) -> None:
    lines = ["method,metric,verdict,u_statistic,p_two_sided,p_one_sided,corrected_beta"]
    for row in sorted(verdicts, key=_verdict_sort_key):
        v = row.result
        lines.append(
            ",".join(
                [
                    row.method,
                    row.metric,
                    v.label,
                    repr(float(v.u_statistic)),
                    repr(float(v.p_two_sided)),
                    repr(float(v.p_one_sided)),
                    repr(float(v.corrected_beta)),
                ]
            )
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_verdicts_md(
    verdicts: Sequence[VerdictRow], reference: str, path: Path
) -> None:
    """Markdown table: one row per method, one column per metric, symbols only."""
    metrics = [m for m in METRIC_ORDER if any(r.metric == m for r in verdicts)]
    methods = sorted({r.method for r in verdicts})
    by_key = {(r.method, r.metric): r.result.label for r in verdicts}
    lines = [
        f"# Verdicts vs {reference}",
        "",
        "▲ better, ▼ worse, ≡ statistically equivalent "
        f"(two-stage Mann-Whitney U, Bonferroni-corrected)",
        "",
        "| method | " + " | ".join(metrics) + " |",
        "|" + "---|" * (len(metrics) + 1),
    ]
    for m in methods:
        cells = [VERDICT_SYMBOLS.get(by_key.get((m, metric), ""), "-") for metric in metrics]
        lines.append("| " + " | ".join([m] + cells) + " |")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_traces(records: Sequence[RunRecord], root: Path) -> None:
    """traces/<method>/<sequence>.csv with the fixed column order."""
    root = Path(root)
    for rec in records:
        path = root / rec.method / f"{rec.sequence}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [TRACE_HEADER] + [row.as_csv() for row in rec.rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(report: BenchmarkReport, out_dir: Path) -> None:
    """metrics.csv + verdicts.csv + verdicts.md under out_dir/report, traces beside."""
    out_dir = Path(out_dir)
    write_metrics_csv(report.metric_rows, out_dir / "report" / "metrics.csv")
    write_verdicts_csv(report.verdicts, out_dir / "report" / "verdicts.csv")
    write_verdicts_md(report.verdicts, report.reference, out_dir / "report" / "verdicts.md")
    write_traces(report.records, out_dir / "traces")
