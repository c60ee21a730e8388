import math
import sys

import numpy as np
import pytest

from exposure_bench.controllers import (
    BUILTIN_METHODS,
    BrightnessTarget,
    ControllerConfig,
    FixedExposure,
    GammaSearch,
    GpUcbSearch,
    PluginController,
    SensitivitySearch,
    gp_ucb_propose,
    make_controller,
    sensitive_region_mask,
)
from exposure_bench.core import BracketFrame, Image12, mean_brightness
from exposure_bench.crf import Crf
from exposure_bench.emulator import EmulatorConfig, emulate
from exposure_bench.errors import ControllerFault
from exposure_bench.synth import SyntheticScene, render, scene_library

LADDER = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)


def identity_cfg(**kwargs):
    return ControllerConfig(**kwargs)


def emu_cfg(crf=None):
    return EmulatorConfig(crf=crf or Crf.identity())


def uniform_scene(radiance_per_ms, shape=(24, 24)):
    return SyntheticScene(radiance=np.full(shape, radiance_per_ms), crf=Crf.identity())


def frame_of(scene, ladder=LADDER):
    images = tuple(render(scene, dt) for dt in ladder)
    return BracketFrame(images=images, exposures_ms=ladder, timestamp=0.0)


def flat_image(dn, shape=(16, 16)):
    return Image12(np.full(shape, dn, dtype=np.uint16))


def closed_loop(controller, frame, cfg_emu, steps):
    """Static closed loop: the same bracket frame answers every request."""
    trace = [controller.initialize(frame, cfg_emu)]
    for _ in range(steps):
        image = emulate(frame, controller.current, cfg_emu)
        trace.append(controller.step(image))
    return trace


class TestControllerConfig:
    def test_defaults_valid(self):
        cfg = ControllerConfig()
        assert cfg.exp_min_ms == 1.0 and cfg.exp_max_ms == 32.0

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            ControllerConfig(exp_min_ms=0.0, exp_max_ms=32.0)
        with pytest.raises(ValueError):
            ControllerConfig(exp_min_ms=8.0, exp_max_ms=4.0)

    def test_bad_start(self):
        with pytest.raises(ValueError):
            ControllerConfig(start_exposure_ms=-1.0)

    def test_with_bounds(self):
        cfg = ControllerConfig().with_bounds(2.0, 16.0)
        assert (cfg.exp_min_ms, cfg.exp_max_ms) == (2.0, 16.0)
        assert cfg.kappa == 0.5

    def test_default_start_is_geometric_midpoint(self):
        ctl = make_controller("ae50", ControllerConfig())
        assert ctl.current == pytest.approx(math.sqrt(1.0 * 32.0))

    def test_start_exposure_respected_and_clamped(self):
        ctl = make_controller("ae50", ControllerConfig(start_exposure_ms=4.0))
        assert ctl.current == 4.0
        ctl = make_controller("ae50", ControllerConfig(start_exposure_ms=500.0))
        assert ctl.current == 32.0


class TestFixedExposure:
    def test_bisects_to_half_brightness(self):
        # radiance 1/16 per ms: brightness crosses 0.5 at ~8 ms
        scene = uniform_scene(1.0 / 16.0)
        ctl = FixedExposure(identity_cfg())
        first = ctl.initialize(frame_of(scene), emu_cfg())
        assert first == pytest.approx(8.0, rel=0.01)
        image = emulate(frame_of(scene), first, emu_cfg())
        assert mean_brightness(image) == pytest.approx(0.5, abs=0.01)

    def test_constant_after_first_frame(self):
        scene = uniform_scene(1.0 / 16.0)
        ctl = FixedExposure(identity_cfg())
        first = ctl.initialize(frame_of(scene), emu_cfg())
        for dn in (0, 500, 4095):
            assert ctl.step(flat_image(dn)) == first

    def test_always_saturated_scene_pins_to_exp_min(self):
        scene = uniform_scene(100.0)  # DN 4095 at every bracket
        ctl = FixedExposure(identity_cfg())
        assert ctl.initialize(frame_of(scene), emu_cfg()) == pytest.approx(1.0, rel=1e-6)

    def test_black_scene_pins_to_exp_max(self):
        scene = uniform_scene(0.0)
        ctl = FixedExposure(identity_cfg())
        assert ctl.initialize(frame_of(scene), emu_cfg()) == pytest.approx(32.0, rel=1e-6)


class TestBrightnessTarget:
    def test_update_formula_worked_example(self):
        # measured 0.25, target 0.5, kappa 0.5: 4 ms -> 4 * (1 + 0.5*0.5) = 5 ms
        ctl = BrightnessTarget(identity_cfg(start_exposure_ms=4.0), target=0.5, name="ae50")
        quarter = Image12(np.array([[1023, 1024], [1024, 1024]], dtype=np.uint16))
        assert mean_brightness(quarter) == pytest.approx(0.25)
        assert ctl.step(quarter) == pytest.approx(5.0)

    def test_fixed_point_at_target(self):
        ctl = BrightnessTarget(identity_cfg(start_exposure_ms=7.0), target=0.5, name="ae50")
        half = Image12(np.array([[2047, 2048]], dtype=np.uint16))
        assert mean_brightness(half) == pytest.approx(0.5)
        assert ctl.step(half) == pytest.approx(7.0)

    def test_direction_of_correction(self):
        dark = flat_image(100)
        bright = flat_image(4000)
        up = BrightnessTarget(identity_cfg(start_exposure_ms=4.0), 0.5, "ae50").step(dark)
        down = BrightnessTarget(identity_cfg(start_exposure_ms=4.0), 0.5, "ae50").step(bright)
        assert up > 4.0 > down

    def test_target_validation(self):
        for bad in (0.0, 1.0, -0.2):
            with pytest.raises(ValueError):
                BrightnessTarget(identity_cfg(), target=bad, name="ae")

    @pytest.mark.parametrize("target", [0.3, 0.5, 0.7])
    def test_converges_within_15_steps(self, target):
        scene = uniform_scene(0.0875)
        ctl = BrightnessTarget(identity_cfg(), target=target, name="ae")
        frame = frame_of(scene)
        closed_loop(ctl, frame, emu_cfg(), steps=15)
        brightness = mean_brightness(emulate(frame, ctl.current, emu_cfg()))
        assert abs(brightness - target) <= 0.02

    def test_clamps_to_bounds(self):
        ctl = BrightnessTarget(identity_cfg(start_exposure_ms=30.0), 0.5, "ae50")
        for _ in range(10):
            ctl.step(flat_image(0))
        assert ctl.current == 32.0
        ctl = BrightnessTarget(identity_cfg(start_exposure_ms=1.5), 0.5, "ae50")
        for _ in range(10):
            ctl.step(flat_image(4095))
        assert ctl.current == 1.0


class TestGammaSearch:
    def test_flat_image_holds_exactly(self):
        ctl = GammaSearch(identity_cfg(start_exposure_ms=6.0))
        assert ctl.step(flat_image(1800)) == 6.0

    def test_dark_textured_image_raises_exposure(self):
        rng = np.random.default_rng(3)
        dark = Image12(rng.integers(0, 120, size=(32, 32)).astype(np.uint16))
        ctl = GammaSearch(identity_cfg(start_exposure_ms=4.0))
        assert ctl.step(dark) > 4.0

    def test_bright_textured_image_lowers_exposure(self):
        rng = np.random.default_rng(4)
        bright = Image12(rng.integers(3950, 4096, size=(32, 32)).astype(np.uint16))
        ctl = GammaSearch(identity_cfg(start_exposure_ms=4.0))
        assert ctl.step(bright) < 4.0

    def test_well_exposed_scene_nearly_holds(self):
        scene = scene_library(height=48, width=64)["gradient_texture"]
        frame = frame_of(scene)
        cfg = emu_cfg()
        ctl = GammaSearch(identity_cfg())
        closed_loop(ctl, frame, cfg, steps=20)
        before = ctl.current
        after = ctl.step(emulate(frame, before, cfg))
        assert abs(after - before) <= 0.02 * before

    def test_step_ratio_bounded_by_gamma_range(self):
        # next/current = 1 + 0.4*(gamma*-1) with gamma* in [1/1.9, 1.9]
        lo = 1.0 + 0.4 * (1.0 / 1.9 - 1.0)
        hi = 1.0 + 0.4 * (1.9 - 1.0)
        rng = np.random.default_rng(11)
        for trial in range(8):
            img = Image12(rng.integers(0, 4096, size=(24, 24)).astype(np.uint16))
            ctl = GammaSearch(identity_cfg(start_exposure_ms=5.0))
            ratio = ctl.step(img) / 5.0
            assert lo - 1e-9 <= ratio <= hi + 1e-9


def oracle_gp_ucb(observations, cfg):
    """Loop-written GP-UCB proposal: explicit kernel matrices and inverse."""
    lo = math.log2(cfg.exp_min_ms)
    hi = math.log2(cfg.exp_max_ms)
    if not observations:
        return 2.0 ** ((lo + hi) / 2.0)
    n = len(observations)
    xs = [o[0] for o in observations]
    ys = [o[1] for o in observations]
    y_mean = sum(ys) / n
    ell = cfg.kim_length_scale_octaves
    gram = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            gram[i, j] = math.exp(-0.5 * ((xs[i] - xs[j]) / ell) ** 2)
            if i == j:
                gram[i, j] += cfg.kim_obs_noise**2
    gram_inv = np.linalg.inv(gram)
    centered = np.array(ys) - y_mean
    best_ucb, best_g = -math.inf, None
    for g in np.linspace(lo, hi, cfg.kim_grid_points):
        k_star = np.array([math.exp(-0.5 * ((g - xi) / ell) ** 2) for xi in xs])
        mu = float(k_star @ gram_inv @ centered) + y_mean
        var = 1.0 - float(k_star @ gram_inv @ k_star)
        ucb = mu + cfg.kim_beta_ucb * math.sqrt(max(var, 0.0))
        if ucb > best_ucb:
            best_ucb, best_g = ucb, g
    return 2.0**best_g


class TestGpUcb:
    def test_empty_window_is_log_midpoint(self):
        cfg = identity_cfg()
        assert gp_ucb_propose([], cfg) == pytest.approx(math.sqrt(1.0 * 32.0))
        cfg = identity_cfg(exp_min_ms=2.0, exp_max_ms=8.0)
        assert gp_ucb_propose([], cfg) == pytest.approx(4.0)

    def test_first_request_without_start_is_log_midpoint(self):
        ctl = GpUcbSearch(identity_cfg())
        first = ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
        assert first == pytest.approx(math.sqrt(32.0))

    def test_dominant_peak_pulls_proposal_within_one_grid_step(self):
        cfg = identity_cfg()
        window = [
            (math.log2(4.0), 10.0),
            (math.log2(1.0), 0.0),
            (math.log2(16.0), 0.0),
            (math.log2(32.0), 0.0),
        ]
        proposal = gp_ucb_propose(window, cfg)
        grid_step = (math.log2(32.0) - math.log2(1.0)) / (cfg.kim_grid_points - 1)
        assert abs(math.log2(proposal) - math.log2(4.0)) <= grid_step + 1e-9

    def test_matches_loop_written_oracle(self):
        rng = np.random.default_rng(17)
        cfg = identity_cfg()
        for trial in range(12):
            n = int(rng.integers(1, 9))
            window = [
                (float(rng.uniform(0.0, 5.0)), float(rng.normal(0.0, 2.0)))
                for _ in range(n)
            ]
            assert gp_ucb_propose(window, cfg) == pytest.approx(
                oracle_gp_ucb(window, cfg), rel=1e-9
            )

    def test_window_is_sliding(self):
        ctl = GpUcbSearch(identity_cfg(kim_window=3))
        ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
        for dn in (100, 400, 900, 1600, 2500):
            ctl.step(flat_image(dn))
        assert len(ctl.window) == 3

    def test_proposals_respect_bounds(self):
        scene = scene_library(height=32, width=32)["gradient_texture"]
        ctl = GpUcbSearch(identity_cfg())
        trace = closed_loop(ctl, frame_of(scene), emu_cfg(), steps=12)
        assert all(1.0 <= e <= 32.0 for e in trace)


class TestSensitivitySearch:
    def dark_texture(self, shape=(20, 20)):
        """DN stays below 2095 even scaled by 1.25**3, so gradients scale
        linearly with the factor and the brighter copy wins all 3 rounds."""
        rng = np.random.default_rng(5)
        return Image12(rng.integers(300, 1000, size=shape).astype(np.uint16))

    def mostly_saturated(self, shape=(20, 20)):
        """90% of pixels pinned at 4095, the rest dark texture."""
        rng = np.random.default_rng(7)
        arr = np.full(shape, 4095, dtype=np.uint16)
        arr[:2, :] = rng.integers(100, 400, size=(2, shape[1]))
        return Image12(arr)

    def init(self, ctl, crf=None):
        scene = uniform_scene(0.05)
        ctl.initialize(frame_of(scene), emu_cfg(crf))
        return ctl

    def test_three_up_moves_compose_exactly(self):
        ctl = self.init(SensitivitySearch(identity_cfg(start_exposure_ms=4.0)))
        assert ctl.step(self.dark_texture()) == pytest.approx(4.0 * 1.25**3, rel=1e-12)

    def test_mostly_saturated_scene_raises_exposure(self):
        # the copy scaled down cannot recover texture from clamped pixels, so
        # the climb continues even when 90% of the image is already pinned
        ctl = self.init(SensitivitySearch(identity_cfg(start_exposure_ms=4.0)))
        assert ctl.step(self.mostly_saturated()) > 4.0

    def test_tie_holds_exposure(self):
        ctl = self.init(SensitivitySearch(identity_cfg(start_exposure_ms=6.0)))
        assert ctl.step(flat_image(1500)) == 6.0

    def test_step_before_initialize_fails(self):
        ctl = SensitivitySearch(identity_cfg())
        with pytest.raises(RuntimeError):
            ctl.step(flat_image(1000))

    def test_sensitive_mask_identity_selects_everything(self):
        mask = sensitive_region_mask(Crf.identity(), flat_image(1000))
        assert mask.all()

    def test_sensitive_mask_gamma_selects_steep_low_end(self):
        # gamma > 1 response rises fastest at low DN, so the steepest-slope
        # quartile must sit strictly below the unselected DNs
        crf = Crf.from_gamma(2.2)
        dn = np.arange(4096, dtype=np.uint16).reshape(64, 64)
        mask = sensitive_region_mask(crf, Image12(dn))
        assert 0.15 <= mask.mean() <= 0.35
        assert dn[mask].max() < dn[~mask].min()


class EchoScripts:
    ECHO = (
        "import sys\n"
        "for line in sys.stdin:\n"
        "    parts = line.split()\n"
        "    if parts and parts[0] == 'STEP':\n"
        "        w, h, exp = int(parts[1]), int(parts[2]), float(parts[3])\n"
        "        pixels = sys.stdin.readline().split()\n"
        "        assert len(pixels) == w * h, f'got {len(pixels)} pixels'\n"
        "        print(exp)\n"
        "        sys.stdout.flush()\n"
    )
    DOUBLE = ECHO.replace("print(exp)", "print(exp * 2.0)")
    ZERO = ECHO.replace("print(exp)", "print(0.0)")
    GARBAGE = ECHO.replace("print(exp)", "print('not-a-number')")
    SLEEPER = (
        "import sys, time\n"
        "sys.stdin.readline(); sys.stdin.readline()\n"
        "time.sleep(30)\n"
    )
    QUITTER = "import sys\nsys.exit(0)\n"


def plugin_ctl(tmp_path, source, name, **cfg_kwargs):
    script = tmp_path / f"{name}.py"
    script.write_text(source)
    cfg = identity_cfg(**cfg_kwargs)
    return PluginController(cfg, f"{sys.executable} {script}")


class TestPluginController:
    def test_echo_plugin_holds_like_fix(self, tmp_path):
        ctl = plugin_ctl(tmp_path, EchoScripts.ECHO, "echo", start_exposure_ms=6.0)
        try:
            first = ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
            assert first == 6.0
            for _ in range(3):
                assert ctl.step(flat_image(1200)) == 6.0
        finally:
            ctl.close()

    def test_protocol_carries_shape_and_exposure(self, tmp_path):
        # the DOUBLE script validates the STEP header and pixel count, then
        # replies with twice the exposure it was handed
        ctl = plugin_ctl(tmp_path, EchoScripts.DOUBLE, "double", start_exposure_ms=5.0)
        try:
            ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
            assert ctl.step(flat_image(900, shape=(7, 11))) == pytest.approx(10.0)
            assert ctl.step(flat_image(900, shape=(7, 11))) == pytest.approx(20.0)
        finally:
            ctl.close()

    def test_nonpositive_reply_clamps_to_exp_min(self, tmp_path):
        ctl = plugin_ctl(tmp_path, EchoScripts.ZERO, "zero", start_exposure_ms=6.0)
        try:
            ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
            assert ctl.step(flat_image(1200)) == 1.0
        finally:
            ctl.close()

    def test_non_numeric_reply_is_a_fault(self, tmp_path):
        ctl = plugin_ctl(tmp_path, EchoScripts.GARBAGE, "garbage")
        try:
            ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
            with pytest.raises(ControllerFault, match="non-numeric"):
                ctl.step(flat_image(1200))
        finally:
            ctl.close()

    def test_timeout_is_a_fault(self, tmp_path):
        ctl = plugin_ctl(tmp_path, EchoScripts.SLEEPER, "sleeper", plugin_timeout_s=0.5)
        try:
            ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
            with pytest.raises(ControllerFault, match="timed out"):
                ctl.step(flat_image(1200))
        finally:
            ctl.close()

    def test_dead_plugin_is_a_fault(self, tmp_path):
        ctl = plugin_ctl(tmp_path, EchoScripts.QUITTER, "quitter")
        try:
            ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
            with pytest.raises(ControllerFault):
                ctl.step(flat_image(1200))
        finally:
            ctl.close()

    def test_missing_binary_is_a_fault(self):
        ctl = PluginController(identity_cfg(), "/nonexistent/binary-xyz")
        with pytest.raises(ControllerFault, match="could not start"):
            ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())

    def test_close_terminates_process(self, tmp_path):
        ctl = plugin_ctl(tmp_path, EchoScripts.ECHO, "echo2")
        ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
        assert ctl.process is not None
        ctl.close()
        assert ctl.process is None


class TestMakeController:
    def test_builtin_tokens(self):
        cfg = identity_cfg()
        assert isinstance(make_controller("fix", cfg), FixedExposure)
        assert isinstance(make_controller("shim", cfg), GammaSearch)
        assert isinstance(make_controller("kim", cfg), GpUcbSearch)
        assert isinstance(make_controller("wang", cfg), SensitivitySearch)
        for token, target in (("ae30", 0.3), ("ae50", 0.5), ("ae70", 0.7)):
            ctl = make_controller(token, cfg)
            assert isinstance(ctl, BrightnessTarget)
            assert ctl.target == pytest.approx(target)
            assert ctl.name == token

    def test_alias_renames(self):
        ctl = make_controller("baseline=ae50", identity_cfg())
        assert ctl.name == "baseline"
        assert isinstance(ctl, BrightnessTarget)

    def test_plugin_token(self):
        ctl = make_controller("plugin:cat -u", identity_cfg())
        assert isinstance(ctl, PluginController)
        assert ctl.command == "cat -u"

    def test_empty_plugin_command_rejected(self):
        with pytest.raises(ValueError):
            make_controller("plugin:", identity_cfg())

    def test_unknown_token_rejected(self):
        with pytest.raises(ValueError, match="unknown method"):
            make_controller("magic", identity_cfg())

    def test_builtin_list_matches_factory(self):
        for token in BUILTIN_METHODS:
            assert make_controller(token, identity_cfg()).name == token


class TestInvariants:
    @pytest.mark.parametrize("token", BUILTIN_METHODS)
    def test_outputs_always_within_bounds(self, token):
        rng = np.random.default_rng(23)
        ctl = make_controller(token, identity_cfg(exp_min_ms=2.0, exp_max_ms=10.0))
        first = ctl.initialize(frame_of(uniform_scene(0.05)), emu_cfg())
        assert 2.0 <= first <= 10.0
        for _ in range(12):
            img = Image12(rng.integers(0, 4096, size=(16, 16)).astype(np.uint16))
            assert 2.0 <= ctl.step(img) <= 10.0

    @pytest.mark.parametrize("token", BUILTIN_METHODS)
    def test_deterministic_across_runs(self, token):
        scene = scene_library(height=32, width=48, noise_sigma=4.0)["gradient_texture"]
        traces = []
        for _ in range(3):
            ctl = make_controller(token, identity_cfg())
            frame = frame_of(scene)
            traces.append(closed_loop(ctl, frame, emu_cfg(), steps=8))
        assert traces[0] == traces[1] == traces[2]
