"""Exposure-control policies.

Each controller consumes the latest emulated image and emits the next target
exposure in milliseconds, clamped to configured bounds. Built-ins:

fix    exposure bisected to 50% brightness on frame 0, then frozen
ae30/ae50/ae70   multiplicative proportional control toward a brightness target
shim   scores gamma-warped copies of the image and steps toward the best gamma
kim    Gaussian-process UCB search over log-exposure on a gradient+entropy score
wang   hill-climb on re-exposed copies, scored on the most light-sensitive DN band
plugin:<cmd>     external process speaking a line protocol on stdin/stdout

All built-ins are deterministic for a fixed configuration.
"""

from __future__ import annotations

import logging
import math
import shlex
import subprocess
import threading
from collections import deque
from dataclasses import dataclass, replace
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from .core import BracketFrame, Image12, mean_brightness
from .crf import Crf, apply_forward
from .emulator import EmulatorConfig, emulate
from .errors import ControllerFault
from .features import entropy_score, grad_score

logger = logging.getLogger("exposure_bench")

BUILTIN_METHODS = ("fix", "ae30", "ae50", "ae70", "shim", "kim", "wang")

_SHIM_GAMMAS = (1 / 1.9, 1 / 1.5, 1 / 1.2, 1.0, 1.2, 1.5, 1.9)


@dataclass(frozen=True)
class ControllerConfig:
    """Bounds plus per-method parameters; defaults follow the benchmark setup."""

    exp_min_ms: float = 1.0
    exp_max_ms: float = 32.0
    start_exposure_ms: Optional[float] = None  # None: geometric midpoint of bounds
    kappa: float = 0.5  # proportional gain of the brightness-target family
    shim_gammas: Tuple[float, ...] = _SHIM_GAMMAS
    shim_gain: float = 0.4
    kim_lambda_entropy: float = 1.0
    kim_window: int = 10
    kim_length_scale_octaves: float = 0.5
    kim_obs_noise: float = 0.05
    kim_beta_ucb: float = 1.0
    kim_grid_points: int = 64
    wang_step: float = 0.25
    wang_iterations: int = 3
    plugin_timeout_s: float = 5.0

    def __post_init__(self) -> None:
        if not 0 < self.exp_min_ms < self.exp_max_ms:
            raise ValueError("need 0 < exp_min_ms < exp_max_ms")
        if self.start_exposure_ms is not None and self.start_exposure_ms <= 0:
            raise ValueError("start exposure must be positive")

    def with_bounds(self, exp_min_ms: float, exp_max_ms: float) -> "ControllerConfig":
        return replace(self, exp_min_ms=exp_min_ms, exp_max_ms=exp_max_ms)


class ExposureController:
    """Stateful policy base: initialize on frame 0, then step once per frame."""

    def __init__(self, cfg: ControllerConfig, name: str = "base") -> None:
        self.cfg = cfg
        self.name = name
        self.current = self._clamp(
            cfg.start_exposure_ms
            if cfg.start_exposure_ms is not None
            else math.sqrt(cfg.exp_min_ms * cfg.exp_max_ms)
        )
        self.history: Deque[Tuple[float, float]] = deque(maxlen=256)

    def initialize(self, frame0: BracketFrame, emulator_cfg: EmulatorConfig) -> float:
        """Request for frame 0. Must be called before step()."""
        self.emulator_cfg = emulator_cfg
        self.current = self._clamp(self._first_request(frame0, emulator_cfg))
        return self.current

    def step(self, image: Image12) -> float:
        """Consume the image emulated at the current request; emit the next one."""
        proposal = self._propose(image)
        self.current = self._clamp(proposal)
        self.history.append((mean_brightness(image), self.current))
        return self.current

    def close(self) -> None:
        """Release external resources (plugin subprocess)."""

    def _first_request(self, frame0: BracketFrame, emulator_cfg: EmulatorConfig) -> float:
        return self.current

    def _propose(self, image: Image12) -> float:
        raise NotImplementedError

    def _clamp(self, exposure_ms: float) -> float:
        return min(max(exposure_ms, self.cfg.exp_min_ms), self.cfg.exp_max_ms)


class FixedExposure(ExposureController):
    """Bisects emulated brightness to 0.5 on the first frame, then never moves."""

    target = 0.5

    def __init__(self, cfg: ControllerConfig, name: str = "fix") -> None:
        super().__init__(cfg, name)

    def _first_request(self, frame0: BracketFrame, emulator_cfg: EmulatorConfig) -> float:
        lo, hi = self.cfg.exp_min_ms, self.cfg.exp_max_ms
        mid = math.sqrt(lo * hi)
        for _ in range(40):
            mid = math.sqrt(lo * hi)
            brightness = mean_brightness(emulate(frame0, mid, emulator_cfg))
            if brightness < self.target:
                lo = mid
            else:
                hi = mid
        return math.sqrt(lo * hi)

    def _propose(self, image: Image12) -> float:
        return self.current


class BrightnessTarget(ExposureController):
    """Multiplicative proportional control toward a mean-brightness target."""

    def __init__(self, cfg: ControllerConfig, target: float, name: str) -> None:
        if not 0 < target < 1:
            raise ValueError("brightness target must be in (0, 1)")
        super().__init__(cfg, name)
        self.target = target

    def _propose(self, image: Image12) -> float:
        brightness = mean_brightness(image)
        return self.current * (1.0 + self.cfg.kappa * (self.target - brightness) / self.target)


class GammaSearch(ExposureController):
    """Scores gamma-warped copies of the image and steps toward the best gamma.

    A candidate gamma g maps the normalized image through x**(1/g), so g > 1
    brightens. The seven scores are interpolated by a fifth-order polynomial
    whose maximizer over the candidate range drives a proportional step.
    """

    def __init__(self, cfg: ControllerConfig, name: str = "shim") -> None:
        super().__init__(cfg, name)

    def _propose(self, image: Image12) -> float:
        norm = image.data.astype(np.float64) / 4095.0
        gammas = np.asarray(self.cfg.shim_gammas)
        scores = np.array([grad_score(norm ** (1.0 / g)) for g in gammas])
        spread = scores.max() - scores.min()
        if spread <= 1e-12 * max(abs(scores.max()), 1.0):
            return self.current  # flat score curve: hold
        coeffs = np.polyfit(gammas, scores, 5)
        grid = np.linspace(gammas.min(), gammas.max(), 512)
        gamma_star = float(grid[int(np.argmax(np.polyval(coeffs, grid)))])
        return self.current * (1.0 + self.cfg.shim_gain * (gamma_star - 1.0))


def gp_ucb_propose(
    observations: Sequence[Tuple[float, float]], cfg: ControllerConfig
) -> float:
    """Next exposure from a GP posterior over log2-exposure.

    observations are (log2 exposure_ms, quality) pairs. With no data the
    proposal is the midpoint of the bounds in log space. Otherwise a
    squared-exponential GP (unit prior variance, mean at the window average)
    is maximized through an upper-confidence-bound rule on a uniform log grid.
    """
    lo = math.log2(cfg.exp_min_ms)
    hi = math.log2(cfg.exp_max_ms)
    if not observations:
        return 2.0 ** ((lo + hi) / 2.0)
    x = np.array([o[0] for o in observations])
    y = np.array([o[1] for o in observations])
    grid = np.linspace(lo, hi, cfg.kim_grid_points)
    ell = cfg.kim_length_scale_octaves
    kernel = np.exp(-0.5 * ((x[:, None] - x[None, :]) / ell) ** 2)
    kernel += cfg.kim_obs_noise**2 * np.eye(len(x))
    cross = np.exp(-0.5 * ((grid[:, None] - x[None, :]) / ell) ** 2)
    y_mean = float(y.mean())
    mu = cross @ np.linalg.solve(kernel, y - y_mean) + y_mean
    var = 1.0 - np.einsum("ij,ji->i", cross, np.linalg.solve(kernel, cross.T))
    ucb = mu + cfg.kim_beta_ucb * np.sqrt(np.maximum(var, 0.0))
    return float(2.0 ** grid[int(np.argmax(ucb))])


class GpUcbSearch(ExposureController):
    """Balances exploring the exposure range against exploiting the best
    gradient+entropy quality seen in a sliding window."""

    def __init__(self, cfg: ControllerConfig, name: str = "kim") -> None:
        super().__init__(cfg, name)
        self.window: Deque[Tuple[float, float]] = deque(maxlen=cfg.kim_window)

    def quality(self, image: Image12) -> float:
        return grad_score(image) + self.cfg.kim_lambda_entropy * entropy_score(image)

    def _first_request(self, frame0: BracketFrame, emulator_cfg: EmulatorConfig) -> float:
        if self.cfg.start_exposure_ms is not None:
            return self.cfg.start_exposure_ms
        return gp_ucb_propose([], self.cfg)

    def _propose(self, image: Image12) -> float:
        self.window.append((math.log2(self.current), self.quality(image)))
        return gp_ucb_propose(list(self.window), self.cfg)


def sensitive_region_mask(crf: Crf, image: Image12) -> np.ndarray:
    """Pixels whose DN sit in the steepest quartile of the response slope.

    The slope (DN per unit irradiance-exposure) is highest where the inverse
    table is flattest; a flat slope profile (identity response) selects the
    whole image.
    """
    slope = 1.0 / np.diff(crf.inverse)
    threshold = np.quantile(slope, 0.75)
    mask = slope[np.minimum(image.data, 4094)] >= threshold
    if not mask.any():
        return np.ones(image.shape, dtype=bool)
    return mask


class SensitivitySearch(ExposureController):
    """Hill-climbs exposure by scoring re-exposed copies of the latest image.

    Each iteration emulates the image at factor*(1+s) and factor*(1-s) of the
    current request and moves toward the higher gradient score, measured on
    the most light-sensitive DN band. Saturated pixels cannot recover texture
    when scaled, which is why this family locks up on overexposed scenes.
    """

    def __init__(self, cfg: ControllerConfig, name: str = "wang") -> None:
        super().__init__(cfg, name)
        self.crf: Optional[Crf] = None

    def initialize(self, frame0: BracketFrame, emulator_cfg: EmulatorConfig) -> float:
        self.crf = emulator_cfg.crf
        return super().initialize(frame0, emulator_cfg)

    def _propose(self, image: Image12) -> float:
        if self.crf is None:
            raise RuntimeError("initialize() must run before step()")
        s = self.cfg.wang_step
        inv = self.crf.inverse[image.data]
        mask = sensitive_region_mask(self.crf, image)
        factor = 1.0
        for _ in range(self.cfg.wang_iterations):
            up = apply_forward(self.crf, inv * (factor * (1.0 + s))) / 4095.0
            down = apply_forward(self.crf, inv * (factor * (1.0 - s))) / 4095.0
            score_up = grad_score(up, mask)
            score_down = grad_score(down, mask)
            if score_up > score_down:
                factor *= 1.0 + s
            elif score_down > score_up:
                factor /= 1.0 + s
            # tie: hold this iterate
        return self.current * factor


class PluginController(ExposureController):
    """External policy over a line protocol.

    Per step the harness writes ``STEP <width> <height> <exposure_ms>`` and a
    second line with all pixels space-separated in row-major order; the plugin
    replies with the next exposure in milliseconds on one line. A reply that
    is not a positive number within the timeout is a ControllerFault, except
    that non-positive numeric replies clamp to the lower bound with a warning.
    """

    def __init__(self, cfg: ControllerConfig, command: str, name: str = "plugin") -> None:
        super().__init__(cfg, name)
        self.command = command
        self.process: Optional[subprocess.Popen] = None

    def initialize(self, frame0: BracketFrame, emulator_cfg: EmulatorConfig) -> float:
        if self.process is None:
            try:
                self.process = subprocess.Popen(
                    shlex.split(self.command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise ControllerFault(f"could not start plugin {self.command!r}: {exc}") from exc
        return super().initialize(frame0, emulator_cfg)

    def _propose(self, image: Image12) -> float:
        if self.process is None:
            raise ControllerFault("plugin not started; initialize() must run first")
        height, width = image.shape
        try:
            self.process.stdin.write(f"STEP {width} {height} {self.current!r}\n")
            self.process.stdin.write(" ".join(map(str, image.data.ravel().tolist())) + "\n")
            self.process.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ControllerFault(f"plugin pipe failed: {exc}") from exc
        reply = self._read_reply()
        try:
            value = float(reply)
        except ValueError as exc:
            raise ControllerFault(f"plugin replied with non-numeric {reply!r}") from exc
        if not math.isfinite(value):
            raise ControllerFault(f"plugin replied with non-finite {reply!r}")
        if value <= 0:
            logger.warning(
                "plugin %r requested exposure %s ms; clamping to %s ms",
                self.command, value, self.cfg.exp_min_ms,
            )
            return self.cfg.exp_min_ms
        return value

    def _read_reply(self) -> str:
        box: List[str] = []
        reader = threading.Thread(
            target=lambda: box.append(self.process.stdout.readline()), daemon=True
        )
        reader.start()
        reader.join(self.cfg.plugin_timeout_s)
        if reader.is_alive():
            self.process.kill()
            raise ControllerFault(
                f"plugin timed out after {self.cfg.plugin_timeout_s} s"
            )
        if not box or not box[0]:
            raise ControllerFault("plugin closed its output stream")
        return box[0].strip()

    def close(self) -> None:
        if self.process is not None and self.process.poll() is None:
            self.process.kill()
            self.process.wait()
        self.process = None


def make_controller(spec: str, cfg: ControllerConfig) -> ExposureController:
    """Build a controller from a method token.

    Tokens: ``fix``, ``ae30``, ``ae50``, ``ae70``, ``shim``, ``kim``, ``wang``,
    or ``plugin:<command>``. An optional ``alias=`` prefix renames the method
    in reports, e.g. ``baseline=ae50``.
    """
    alias = None
    if "=" in spec:
        alias, _, spec = spec.partition("=")
        alias = alias.strip()
        spec = spec.strip()
    if spec.startswith("plugin:"):
        command = spec[len("plugin:") :]
        if not command:
            raise ValueError("plugin token needs a command: plugin:<cmd>")
        return PluginController(cfg, command, name=alias or "plugin")
    name = alias or spec
    if spec == "fix":
        return FixedExposure(cfg, name)
    if spec in ("ae30", "ae50", "ae70"):
        return BrightnessTarget(cfg, target=int(spec[2:]) / 100.0, name=name)
    if spec == "shim":
        return GammaSearch(cfg, name)
    if spec == "kim":
        return GpUcbSearch(cfg, name)
    if spec == "wang":
        return SensitivitySearch(cfg, name)
    raise ValueError(f"unknown method {spec!r}; known: {', '.join(BUILTIN_METHODS)}, plugin:<cmd>")
