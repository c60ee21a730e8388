"""Command-line entry point.

Each subcommand wraps one library operation. Exit codes: 0 success, 1 bad
input (flags, file contents, ranges), 2 runtime failure (I/O, plugin faults,
anything unexpected). A versioned JSON config file can stand in for any flag
not given on the command line; explicit flags always win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import crf as crf_mod
from .controllers import BUILTIN_METHODS, ControllerConfig, make_controller
from .dataset_io import (
    load_dataset,
    load_sequence,
    load_trajectory,
    save_image12,
    save_sequence,
)
from .emulator import DEFAULT_ALPHA, EmulatorConfig, emulate
from .errors import (
    BadQuaternion,
    CorruptImage,
    DegenerateInput,
    DimensionMismatch,
    EmptyInput,
    ExposureBenchError,
    InsufficientExposureSpan,
    LadderMismatch,
    MissingManifest,
    NonMonotoneTimestamps,
    NonStaticStack,
    NoOverlap,
    ParseError,
    RangeViolation,
    TrajectoryTooShort,
)
from .runner import (
    BenchmarkConfig,
    DEFAULT_REFERENCE,
    build_sample_sets,
    read_metrics_csv,
    run_benchmark,
    verdict_table,
    write_report,
    write_verdicts_csv,
    write_verdicts_md,
)
from .synth import render_bracket_sequence, scene_library
from .trajectory import MetricConfig, Trajectory, relative_errors

CONFIG_VERSION = 1
DEFAULT_LADDER = "1,2,4,8,16,32"
DEFAULT_WINDOWS = "5:50"

# Input problems exit 1; everything else that goes wrong exits 2.
_VALIDATION_ERRORS = (
    ValueError,
    ParseError,
    LadderMismatch,
    MissingManifest,
    RangeViolation,
    BadQuaternion,
    NonMonotoneTimestamps,
    EmptyInput,
    DegenerateInput,
    NoOverlap,
    TrajectoryTooShort,
    InsufficientExposureSpan,
    DimensionMismatch,
    NonStaticStack,
    CorruptImage,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; this toolkit reserves 2 for runtime errors."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_windows(text: str) -> Tuple[float, ...]:
    """`A:B` inclusive integer range, or a comma list of window lengths."""
    text = str(text).strip()
    if ":" in text:
        lo_s, _, hi_s = text.partition(":")
        lo, hi = int(lo_s), int(hi_s)
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad window range {text!r}")
        return tuple(float(w) for w in range(lo, hi + 1))
    values = tuple(float(tok) for tok in text.split(",") if tok.strip())
    if not values:
        raise ValueError("empty window list")
    return values


def _parse_float_list(text: str, what: str) -> Tuple[float, ...]:
    values = tuple(float(tok) for tok in str(text).split(",") if tok.strip())
    if not values:
        raise ValueError(f"empty {what} list")
    return values


def _resolved(value, default):
    return default if value is None else value


def _load_crf_arg(crf_path: Optional[str], gamma) -> crf_mod.Crf:
    if crf_path and gamma is not None:
        raise ValueError("give --crf or --gamma, not both")
    if crf_path:
        return crf_mod.load_crf(crf_path)
    if gamma is not None:
        return crf_mod.Crf.from_gamma(float(gamma))
    return crf_mod.Crf.identity()


def _apply_config(args: argparse.Namespace) -> None:
    path = getattr(args, "config", None)
    if not path:
        return
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("version") != CONFIG_VERSION:
        raise ParseError(f"{path}: expected a JSON object with version {CONFIG_VERSION}")
    section = data.get(args.subcommand, {})
    if not isinstance(section, dict):
        raise ParseError(f"{path}: section {args.subcommand!r} must be an object")
    for key, value in section.items():
        attr = key.replace("-", "_")
        if attr in ("config", "subcommand", "func") or not hasattr(args, attr):
            raise ParseError(f"{path}: unknown option {key!r} for {args.subcommand!r}")
        if getattr(args, attr) is None:
            setattr(args, attr, value)


def _methods_from_args(args: argparse.Namespace) -> List[str]:
    methods: List[str] = []
    if args.methods is not None:
        if isinstance(args.methods, str):
            methods.extend(tok.strip() for tok in args.methods.split(",") if tok.strip())
        else:
            methods.extend(str(tok) for tok in args.methods)
    if args.method:
        methods.extend(str(tok) for tok in args.method)
    if not methods:
        methods = list(BUILTIN_METHODS)
    return methods


def _discover_trajectories(
    root: Path, method_names: Sequence[str], seq_ids: Sequence[str]
) -> Dict[Tuple[str, str], Trajectory]:
    found: Dict[Tuple[str, str], Trajectory] = {}
    for name in method_names:
        for seq_id in seq_ids:
            path = Path(root) / name / f"{seq_id}.txt"
            if path.is_file():
                found[(name, seq_id)] = load_trajectory(path)
    return found


def _cmd_synth(args: argparse.Namespace) -> int:
    ladder = _parse_float_list(_resolved(args.ladder, DEFAULT_LADDER), "ladder")
    crf = _load_crf_arg(args.crf, args.gamma)
    scenes = scene_library(
        height=int(_resolved(args.height, 120)),
        width=int(_resolved(args.width, 160)),
        crf=crf,
        noise_sigma=float(_resolved(args.noise_sigma, 0.0)),
    )
    if args.scene != "all" and args.scene not in scenes:
        raise ValueError(
            f"unknown scene {args.scene!r}; choose from {', '.join(sorted(scenes))} or all"
        )
    names = sorted(scenes) if args.scene == "all" else [args.scene]
    out = Path(args.out)
    frames = int(_resolved(args.frames, 10))
    seed = int(_resolved(args.seed, 0))
    for name in names:
        seq = render_bracket_sequence(scenes[name], ladder, frames, seed=seed)
        target = out / name if args.scene == "all" else out
        save_sequence(seq, target)
        print(f"wrote {len(seq)}-frame sequence {name!r} to {target}")
    return 0


def _cmd_calibrate_crf(args: argparse.Namespace) -> int:
    seq = load_sequence(Path(args.stack))
    frame_idx = int(_resolved(args.frame, 0))
    if not 0 <= frame_idx < len(seq):
        raise ValueError(f"frame {frame_idx} out of range for {len(seq)}-frame sequence")
    frame = seq.frames[frame_idx]
    stack = list(zip(frame.images, frame.exposures_ms))
    fitted = crf_mod.estimate_crf(
        stack,
        max_iterations=int(_resolved(args.max_iter, 50)),
        max_residual_dn=float(_resolved(args.max_residual, 50.0)),
    )
    crf_mod.save_crf(fitted, args.out)
    residual = crf_mod.refit_residual_dn(fitted, stack)
    print(f"wrote response table to {args.out} (refit residual {residual:.2f} DN)")
    return 0


def _cmd_emulate(args: argparse.Namespace) -> int:
    seq = load_sequence(Path(args.sequence))
    targets = _parse_float_list(args.target, "target exposure")
    cfg = EmulatorConfig(
        crf=_load_crf_arg(args.crf, args.gamma),
        alpha=float(_resolved(args.alpha, DEFAULT_ALPHA)),
    )
    out = Path(args.out)
    count = 0
    for i, frame in enumerate(seq.frames):
        for target in targets:
            image = emulate(frame, target, cfg)
            save_image12(image, out / f"{i:06d}_t{target:g}.png")
            count += 1
    print(f"wrote {count} emulated frames to {out}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    sequences = load_dataset(Path(args.dataset))
    if not sequences:
        raise ValueError(f"no sequence directories under {args.dataset}")
    methods = _methods_from_args(args)
    controller_cfg = ControllerConfig(
        exp_min_ms=float(_resolved(args.exp_min, 1.0)),
        exp_max_ms=float(_resolved(args.exp_max, 32.0)),
        start_exposure_ms=(
            float(args.start_exposure) if args.start_exposure is not None else None
        ),
    )
    out = Path(args.out)
    cfg = BenchmarkConfig(
        emulator=EmulatorConfig(
            crf=_load_crf_arg(args.crf, args.gamma),
            alpha=float(_resolved(args.alpha, DEFAULT_ALPHA)),
        ),
        controller=controller_cfg,
        reference=str(_resolved(args.reference, DEFAULT_REFERENCE)),
        beta=float(_resolved(args.beta, 0.05)),
        max_features=int(_resolved(args.max_features, 3000)),
        grid_n=int(_resolved(args.grid_n, 20)),
        metric_cfg=MetricConfig(
            windows_m=parse_windows(_resolved(args.windows, DEFAULT_WINDOWS))
        ),
        workers=int(args.workers) if args.workers is not None else None,
        dump_dir=out / "frames" if args.dump_frames else None,
    )
    est = {}
    if args.trajectories:
        names = [make_controller(m, controller_cfg).name for m in methods]
        est = _discover_trajectories(
            Path(args.trajectories), names, [s.id for s in sequences]
        )
    report = run_benchmark(sequences, methods, cfg, est_trajectories=est)
    write_report(report, out)
    faults = [r for r in report.records if r.fault]
    print(
        f"ran {len(report.records)} (method x sequence) pairs; "
        f"{len(faults)} faulted; wrote {out / 'report'}"
    )
    for rec in faults:
        print(f"  fault: {rec.method}/{rec.sequence}: {rec.fault_message}")
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    est = load_trajectory(Path(args.est))
    ref = load_trajectory(Path(args.ref))
    cfg = MetricConfig(
        windows_m=parse_windows(_resolved(args.windows, DEFAULT_WINDOWS)),
        association_tol_s=float(_resolved(args.tol, 0.15)),
    )
    result = relative_errors(est, ref, cfg)
    lines = ["window_m,rte_percent,rre_deg_per_m"]
    for window, rte_val, rre_val in result.per_window:
        lines.append(f"{window:g},{rte_val!r},{rre_val!r}")
    lines.append(f"mean,{result.rte_percent!r},{result.rre_deg_per_m!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    rows = read_metrics_csv(Path(args.metrics))
    if not rows:
        raise EmptyInput(f"{args.metrics} has no metric rows")
    sets = build_sample_sets(rows)
    reference = str(_resolved(args.reference, DEFAULT_REFERENCE))
    verdicts = verdict_table(sets, reference, float(_resolved(args.beta, 0.05)))
    wrote = False
    if args.out_csv:
        write_verdicts_csv(verdicts, Path(args.out_csv))
        print(f"wrote {args.out_csv}")
        wrote = True
    if args.out_md:
        write_verdicts_md(verdicts, reference, Path(args.out_md))
        print(f"wrote {args.out_md}")
        wrote = True
    if not wrote:
        for row in verdicts:
            v = row.result
            print(
                f"{row.method},{row.metric},{v.label},"
                f"p_two_sided={v.p_two_sided!r},p_one_sided={v.p_one_sided!r}"
            )
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--config",
        help=f"JSON config (version {CONFIG_VERSION}) supplying any flag not given here",
    )


def _add_crf_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--crf", help="response table file (from calibrate-crf)")
    p.add_argument(
        "--gamma", type=float, help="use an analytic gamma response instead of --crf"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="exposure-bench",
        description="Exposure emulation, auto-exposure policies, and benchmarking.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser(
        "synth", parents=[], help="generate oracle sequences", description="Generate synthetic oracle sequences with known radiance, response, and poses."
    )
    p.add_argument("--scene", required=True, help="scene name, or 'all' for the full library")
    p.add_argument("--out", required=True, help="output sequence (or dataset) directory")
    p.add_argument("--frames", type=int, help="frame count (default 10)")
    p.add_argument("--ladder", help=f"comma list of exposure ms (default {DEFAULT_LADDER})")
    p.add_argument("--noise-sigma", type=float, help="additive DN noise sigma (default 0)")
    p.add_argument("--seed", type=int, help="noise seed (default 0)")
    p.add_argument("--height", type=int, help="image height (default 120)")
    p.add_argument("--width", type=int, help="image width (default 160)")
    _add_crf_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser(
        "calibrate-crf", help="fit a response table from one bracket frame",
        description="Fit the camera response from a static multi-exposure stack."
    )
    p.add_argument("--stack", required=True, help="sequence directory holding the stack")
    p.add_argument("--frame", type=int, help="frame index to use (default 0)")
    p.add_argument("--out", required=True, help="output response table file")
    p.add_argument("--max-iter", type=int, help="fit iteration cap (default 50)")
    p.add_argument(
        "--max-residual", type=float, help="reject stacks above this refit RMSE DN (default 50)"
    )
    _add_common(p)
    p.set_defaults(func=_cmd_calibrate_crf)

    p = sub.add_parser(
        "emulate", help="re-expose a sequence at new exposure times",
        description="Write emulated frames at arbitrary target exposures."
    )
    p.add_argument("--sequence", required=True, help="sequence directory")
    p.add_argument("--target", required=True, help="target exposure ms (comma list allowed)")
    p.add_argument("--out", required=True, help="output directory for PNG frames")
    p.add_argument("--alpha", type=float, help="saturation threshold (default 0.01)")
    _add_crf_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_emulate)

    p = sub.add_parser(
        "run", help="benchmark exposure policies on a dataset",
        description="Run controllers closed-loop over every sequence and write the report."
    )
    p.add_argument("--dataset", required=True, help="dataset root (sequence dirs inside)")
    p.add_argument("--out", required=True, help="output directory (report/ and traces/)")
    p.add_argument(
        "--methods",
        help=f"comma list of methods (default {','.join(BUILTIN_METHODS)}); "
        "tokens: builtin name, alias=name, or alias=plugin:<command>",
    )
    p.add_argument(
        "--method",
        action="append",
        help="add one method token (repeatable; commas allowed inside plugin commands)",
    )
    p.add_argument("--reference", help="reference method name (default ae50)")
    p.add_argument("--beta", type=float, help="significance level before correction (default 0.05)")
    p.add_argument("--alpha", type=float, help="saturation threshold (default 0.01)")
    p.add_argument("--exp-min", type=float, help="exposure lower bound ms (default 1)")
    p.add_argument("--exp-max", type=float, help="exposure upper bound ms (default 32)")
    p.add_argument("--start-exposure", type=float, help="initial request ms (default: log midpoint)")
    p.add_argument("--windows", help=f"evaluation windows in meters (default {DEFAULT_WINDOWS})")
    p.add_argument(
        "--trajectories",
        help="directory of estimated trajectories <method>/<sequence>.txt (enables rte/rre)",
    )
    p.add_argument("--max-features", type=int, help="keypoint cap per frame (default 3000)")
    p.add_argument("--grid-n", type=int, help="coverage grid side (default 20)")
    p.add_argument("--workers", type=int, help="worker pool size (default: EXPOSURE_BENCH_WORKERS or 4)")
    p.add_argument("--dump-frames", action="store_true", default=None, help="write emulated frames under out/frames")
    p.add_argument("--seed", type=int, help="recorded for provenance; built-in methods are deterministic")
    _add_crf_flags(p)
    _add_common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser(
        "metrics", help="windowed trajectory errors for one pair",
        description="Relative translation/rotation errors of an estimated trajectory."
    )
    p.add_argument("--est", required=True, help="estimated trajectory (TUM format)")
    p.add_argument("--ref", required=True, help="reference trajectory (TUM format)")
    p.add_argument("--windows", help=f"windows in meters, A:B or comma list (default {DEFAULT_WINDOWS})")
    p.add_argument("--tol", type=float, help="association tolerance seconds (default 0.15)")
    p.add_argument("--out", help="output CSV (default: stdout)")
    _add_common(p)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser(
        "stats", help="verdict table from a metrics CSV",
        description="Two-stage Mann-Whitney verdicts of every method against the reference."
    )
    p.add_argument("--metrics", required=True, help="metrics.csv from a run")
    p.add_argument("--reference", help="reference method name (default ae50)")
    p.add_argument("--beta", type=float, help="significance level before correction (default 0.05)")
    p.add_argument("--out-csv", help="write verdicts CSV here")
    p.add_argument("--out-md", help="write verdicts Markdown table here")
    _add_common(p)
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args)
        return int(args.func(args))
    except _VALIDATION_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ExposureBenchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 2, not tracebacks
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
