"""Exposure emulation from bracket sequences, AE policies, and benchmarking."""

from .core import (
    DN_MAX,
    BracketFrame,
    BracketSequence,
    Image12,
    Pose,
    mean_brightness,
    saturation_level,
)
from .crf import (
    Crf,
    NoiseProfile,
    estimate_crf,
    estimate_noise,
    load_crf,
    load_noise_profile,
    save_crf,
    save_noise_profile,
)
from .emulator import DEFAULT_ALPHA, EmulatorConfig, emulate, emulation_rmse, select_source
from .controllers import (
    BUILTIN_METHODS,
    ControllerConfig,
    ExposureController,
    make_controller,
)
from .features import FeatureSet, detect, feature_reward, grid_coverage, match
from .trajectory import (
    MetricConfig,
    RelativeErrorResult,
    Trajectory,
    is_success,
    relative_errors,
    rre,
    rte,
    time_before_failure,
)
from .stats import SampleSet, Verdict, bonferroni, mann_whitney_u, verdict
from .synth import SyntheticScene, render_bracket_sequence, scene_library
from .dataset_io import (
    load_dataset,
    load_sequence,
    load_trajectory,
    save_sequence,
    save_trajectory,
)
from .runner import (
    BenchmarkConfig,
    BenchmarkReport,
    RunRecord,
    TraceRow,
    run_benchmark,
    run_sequence,
    write_report,
)
from . import errors

__version__ = "0.1.0"

__all__ = [
    "DN_MAX",
    "BracketFrame",
    "BracketSequence",
    "Image12",
    "Pose",
    "mean_brightness",
    "saturation_level",
    "Crf",
    "NoiseProfile",
    "estimate_crf",
    "estimate_noise",
    "load_crf",
    "load_noise_profile",
    "save_crf",
    "save_noise_profile",
    "DEFAULT_ALPHA",
    "EmulatorConfig",
    "emulate",
    "emulation_rmse",
    "select_source",
    "BUILTIN_METHODS",
    "ControllerConfig",
    "ExposureController",
    "make_controller",
    "FeatureSet",
    "detect",
    "feature_reward",
    "grid_coverage",
    "match",
    "MetricConfig",
    "RelativeErrorResult",
    "Trajectory",
    "is_success",
    "relative_errors",
    "rre",
    "rte",
    "time_before_failure",
    "SampleSet",
    "Verdict",
    "bonferroni",
    "mann_whitney_u",
    "verdict",
    "SyntheticScene",
    "render_bracket_sequence",
    "scene_library",
    "load_dataset",
    "load_sequence",
    "load_trajectory",
    "save_sequence",
    "save_trajectory",
    "BenchmarkConfig",
    "BenchmarkReport",
    "RunRecord",
    "TraceRow",
    "run_benchmark",
    "run_sequence",
    "write_report",
    "errors",
]
