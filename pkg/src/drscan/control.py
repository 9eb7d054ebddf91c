"""Hybrid scan controller: image-based visual servoing blended with a
height compensator.

The visual branch drives the stacked 4-feature error (tip pixel and
light-centre pixel against one shared image target) through a learned
inverse Jacobian, v = -gain * Jhat+ @ e.  The height branch is a vertical
PID on the contact-height error.  The two are mixed by a weight that tends
to 1 far from the target height (vision leads the approach) and to the
configured floor alpha once contact is established.

Trials run a fixed-rate loop: sensors, Kalman filtering, stage logic,
action blending, kinematic step, logging.  Camera measurements arrive at
half the control rate; the filters coast in between.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import spectra as sp
from .perception import (
    FeatureVector,
    SensorSuite,
    init_track,
    kf_step,
    measure_features,
    measure_height,
)
from .scene import (
    OffTissueError,
    Scene,
    SceneState,
    clamp_speed,
    contact_height,
    ground_truth_features,
    step,
)
from .seeding import substream
from .validation import check_positive, check_unit_interval


class Stage(enum.Enum):
    APPROACH = "approach"
    SCANNING = "scanning"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class ControlConfig:
    """Controller gains and rates.  Defaults run the bundled phantom scenes."""

    gain: float = 0.8                 # IBVS lambda
    alpha: float = 0.2                # blend floor at zero height error
    k_blend: float = 2.0              # mm scale of the blend exponential
    h_star: float = 0.0               # target contact height, mm
    height_kp: float = 3.0
    height_ki: float = 0.5
    height_kd: float = 0.0
    speed_kp: float = 2.0
    speed_ki: float = 2.0
    speed_limit: float = 10.0         # mm/s, issued command and height branch
    vs_speed_limit: float = 25.0      # mm/s, visual branch before blending
    approach_threshold_px: float = 1.29
    height_tolerance: float = 0.5     # mm, on measured height
    scan_pixel_speed: float = 12.0    # px/s, nominal target drift rate
    scan_speed_target: float = 5.5    # mm/s, lateral probe speed during scan
    control_rate: float = 30.0        # Hz
    feature_rate: float = 15.0        # Hz, camera measurements
    spectro_rate: float = 10.0        # Hz, spectrometer captures while scanning
    dropout_limit: int = 30           # consecutive missed camera frames
    timeout: float = 120.0            # s
    height_compensation: bool = True  # ablation switch
    # feature-track Kalman parameters.  kf_r is the detector pixel variance;
    # kf_q is kept well below the generic track default because both servo
    # targets are static or drift at constant rate, and a calmer filter is
    # what lets the true arrival error sit inside the approach threshold
    kf_q: float = 0.1                 # px^2/s^3 white-acceleration PSD
    kf_r: float = 1.0                 # px^2 measurement variance

    def __post_init__(self):
        check_positive(self.gain, "gain")
        check_unit_interval(self.alpha, "alpha")
        check_positive(self.k_blend, "k_blend")
        check_positive(self.control_rate, "control_rate")
        if self.kf_q < 0 or self.kf_r < 0:
            raise ValueError("kf_q and kf_r must be non-negative")
        ratio = self.control_rate / self.feature_rate
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError(
                "control_rate must be an integer multiple of feature_rate, "
                f"got {self.control_rate}/{self.feature_rate}"
            )

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate

    @property
    def ticks_per_measurement(self) -> int:
        return int(round(self.control_rate / self.feature_rate))


@dataclass(frozen=True)
class ScanCommand:
    """Scan line in image coordinates (pixels of the third-person camera)."""

    start: tuple[float, float]
    end: tuple[float, float]

    @property
    def length_px(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))

    def point_at(self, progress_px: float) -> np.ndarray:
        s = min(max(progress_px, 0.0), self.length_px)
        frac = s / self.length_px
        p0 = np.asarray(self.start, dtype=float)
        p1 = np.asarray(self.end, dtype=float)
        return p0 + frac * (p1 - p0)


def command_from_world(
    scene: Scene, start_world, end_world
) -> ScanCommand:
    """Project two on-tissue world points into the third-person image."""
    p0 = scene.third_person.project(np.asarray(start_world, dtype=float))
    p1 = scene.third_person.project(np.asarray(end_world, dtype=float))
    return ScanCommand(start=(float(p0[0]), float(p0[1])), end=(float(p1[0]), float(p1[1])))


class Pid:
    """Textbook PID with conditional anti-windup: the integrator freezes
    while the output is saturated and the error would push it further."""

    def __init__(
        self,
        kp: float,
        ki: float,
        kd: float = 0.0,
        output_limit: float | None = None,
        integrator_limit: float | None = None,
    ):
        self.kp = kp
        self.ki = ki
        self.kd = kd
        self.output_limit = output_limit
        self.integrator_limit = integrator_limit
        self.reset()

    def reset(self) -> None:
        self.integral = 0.0
        self._prev_error: float | None = None

    def _raw(self, error: float, derivative: float) -> float:
        return self.kp * error + self.ki * self.integral + self.kd * derivative

    def update(self, error: float, dt: float) -> float:
        derivative = 0.0
        if self.kd != 0.0 and self._prev_error is not None:
            derivative = (error - self._prev_error) / dt
        self._prev_error = error

        unsat = self._raw(error, derivative)
        saturated = self.output_limit is not None and abs(unsat) > self.output_limit
        if not (saturated and unsat * error > 0):
            self.integral += error * dt
            if self.integrator_limit is not None:
                self.integral = min(max(self.integral, -self.integrator_limit),
                                    self.integrator_limit)
        out = self._raw(error, derivative)
        if self.output_limit is not None:
            out = min(max(out, -self.output_limit), self.output_limit)
        return out


def blend_weight(height_error: float, alpha: float, k: float) -> float:
    """Mixing weight beta for the visual branch.

    beta = alpha + (1 - alpha) * (1 - exp(-|height_error| / k)); far from the
    target height vision dominates (beta -> 1), at it beta floors at alpha.
    """
    check_unit_interval(alpha, "alpha")
    check_positive(k, "k")
    d = abs(height_error)
    return alpha + (1.0 - alpha) * (1.0 - math.exp(-d / k))


@dataclass(frozen=True)
class ActionPair:
    """Both branch commands plus the blend; `combined` is the exact mix."""

    visual: np.ndarray
    height: np.ndarray
    beta: float

    @property
    def combined(self) -> np.ndarray:
        return self.beta * self.visual + (1.0 - self.beta) * self.height


def ibvs_velocity(
    inv_jacobian: np.ndarray,
    error: np.ndarray,
    gain: float,
    limit: float | None = None,
) -> np.ndarray:
    """v = -gain * Jhat+ @ e, optionally speed-clamped."""
    v = -gain * np.asarray(inv_jacobian, dtype=float) @ np.asarray(error, dtype=float)
    if limit is not None:
        v = clamp_speed(v, limit)
    return v


# ---------------------------------------------------------------------------
# controller
# ---------------------------------------------------------------------------


@dataclass
class ControlDecision:
    stage: Stage
    command: np.ndarray            # issued velocity, already speed-clamped
    target: np.ndarray             # current image target s* (2,)
    action: ActionPair | None      # None before the filters initialize
    filtered: np.ndarray | None    # (4,) filtered features
    fail_reason: str | None = None


#: how long the approach gate must hold before the stage advances, seconds
_GATE_DWELL_S = 0.5


class HybridController:
    """Stage machine + blended control law.  Pure decision logic: feed it
    measurements, it returns velocity commands.  Scene stepping, sensor
    simulation and logging live in `run_trial`."""

    def __init__(self, predict_inverse_jacobian, config: ControlConfig, command: ScanCommand):
        if command.length_px <= 0:
            raise ValueError("scan command has zero image length")
        self.predict = predict_inverse_jacobian
        self.cfg = config
        self.command = command
        self.stage = Stage.APPROACH
        self.fail_reason: str | None = None
        self.height_pid = Pid(
            config.height_kp,
            config.height_ki,
            config.height_kd,
            output_limit=config.speed_limit,
            integrator_limit=5.0,
        )
        self.speed_pid = Pid(
            config.speed_kp,
            config.speed_ki,
            output_limit=2.0 * config.scan_pixel_speed,
            integrator_limit=10.0,
        )
        self.tip_track = None
        self.light_track = None
        self.progress_px = 0.0
        self.dropouts = 0
        self.approach_time: float | None = None
        self.done_time: float | None = None
        self._last_lateral_speed = 0.0
        self._gate_ticks = 0

    # -- helpers --

    def _fail(self, t: float, reason: str) -> None:
        self.stage = Stage.FAILED
        self.fail_reason = reason

    def _filtered_features(self) -> np.ndarray:
        return np.concatenate([self.tip_track.position, self.light_track.position])

    def _update_tracks(self, z: FeatureVector | None, dt: float) -> None:
        if self.tip_track is None:
            if z is not None:
                self.tip_track = init_track(z.tip, q=self.cfg.kf_q, r=self.cfg.kf_r)
                self.light_track = init_track(z.light, q=self.cfg.kf_q, r=self.cfg.kf_r)
            return
        z_tip = z.tip if z is not None else None
        z_light = z.light if z is not None else None
        self.tip_track = kf_step(self.tip_track, dt, z_tip)
        self.light_track = kf_step(self.light_track, dt, z_light)

    def _target(self, dt: float) -> np.ndarray:
        if self.stage is not Stage.SCANNING:
            return np.asarray(self.command.start, dtype=float)
        # target drifts along the line; a PI on the executed lateral speed
        # trims the drift rate toward the Cartesian speed target
        err = self.cfg.scan_speed_target - self._last_lateral_speed
        omega = self.cfg.scan_pixel_speed + self.speed_pid.update(err, dt)
        omega = min(max(omega, 0.0), 3.0 * self.cfg.scan_pixel_speed)
        self.progress_px = min(self.progress_px + omega * dt, self.command.length_px)
        return self.command.point_at(self.progress_px)

    # -- main entry --

    def update(
        self,
        t: float,
        feature_meas: FeatureVector | None,
        measurement_tick: bool,
        h_meas: float,
    ) -> ControlDecision:
        cfg = self.cfg
        dt = cfg.dt

        if self.stage in (Stage.DONE, Stage.FAILED):
            return ControlDecision(
                stage=self.stage,
                command=np.zeros(3),
                target=np.asarray(self.command.start, dtype=float),
                action=None,
                filtered=None,
                fail_reason=self.fail_reason,
            )

        if measurement_tick:
            if feature_meas is None:
                self.dropouts += 1
                if self.dropouts >= cfg.dropout_limit:
                    self._fail(t, "light_centre_detection")
            else:
                self.dropouts = 0
        self._update_tracks(feature_meas, dt)

        if t >= cfg.timeout and self.stage in (Stage.APPROACH, Stage.SCANNING):
            self._fail(t, "timeout")

        if self.stage is Stage.FAILED or self.tip_track is None:
            return ControlDecision(
                stage=self.stage,
                command=np.zeros(3),
                target=np.asarray(self.command.start, dtype=float),
                action=None,
                filtered=None,
                fail_reason=self.fail_reason,
            )

        filt = self._filtered_features()
        height_err = h_meas - cfg.h_star

        # stage transitions use filtered pixels and the measured height
        start = np.asarray(self.command.start, dtype=float)
        end = np.asarray(self.command.end, dtype=float)
        # the distance is taken on the stacked 4-vector, not per feature:
        # at contact the light centre sits a bloom offset below the tip, the
        # servo splits that offset between the two features, and the stacked
        # norm has to come in well under the threshold before either feature
        # alone is allowed near it.  The gate is debounced: a single filtered
        # sample can dip under the threshold on a noise excursion long before
        # the probe is truly there, so the condition has to hold for
        # _GATE_DWELL_S before the stage advances
        if self.stage is Stage.APPROACH:
            near_start = (
                np.linalg.norm(filt - np.concatenate([start, start]))
                < cfg.approach_threshold_px
            )
            if near_start and abs(height_err) < cfg.height_tolerance:
                self._gate_ticks += 1
            else:
                self._gate_ticks = 0
            if self._gate_ticks >= max(1, int(round(_GATE_DWELL_S * cfg.control_rate))):
                self.stage = Stage.SCANNING
                self.approach_time = t
        elif self.stage is Stage.SCANNING:
            at_end = (
                self.progress_px >= self.command.length_px
                and np.linalg.norm(filt - np.concatenate([end, end]))
                < cfg.approach_threshold_px
            )
            if at_end:
                self.stage = Stage.DONE
                self.done_time = t
                return ControlDecision(
                    stage=self.stage,
                    command=np.zeros(3),
                    target=end,
                    action=None,
                    filtered=filt,
                    fail_reason=None,
                )

        target = self._target(dt)
        error = np.concatenate([filt[:2] - target, filt[2:] - target])
        a_vs = ibvs_velocity(self.predict(filt), error, cfg.gain, cfg.vs_speed_limit)
        if cfg.height_compensation:
            a_hc = np.array([0.0, 0.0, self.height_pid.update(-height_err, dt)])
            beta = blend_weight(height_err, cfg.alpha, cfg.k_blend)
        else:
            a_hc = np.zeros(3)
            beta = 1.0
        action = ActionPair(visual=a_vs, height=a_hc, beta=beta)
        command = clamp_speed(action.combined, cfg.speed_limit)
        self._last_lateral_speed = float(np.hypot(command[0], command[1]))
        return ControlDecision(
            stage=self.stage,
            command=command,
            target=target,
            action=action,
            filtered=filt,
            fail_reason=self.fail_reason,
        )


# ---------------------------------------------------------------------------
# trial execution
# ---------------------------------------------------------------------------

_LOG_COLUMNS = (
    ["tick", "t", "stage"]
    + [f"{p}_{q}" for p in ("true", "meas", "filt") for q in ("u_tip", "v_tip", "u_light", "v_light")]
    + ["u_star", "v_star", "h_true", "h_meas", "beta"]
    + [f"avs_{ax}" for ax in "xyz"]
    + [f"ahc_{ax}" for ax in "xyz"]
    + [f"a_{ax}" for ax in "xyz"]
    + ["x", "y", "z", "spectrum_id"]
)


@dataclass
class TrialLog:
    """Tick-by-tick record of one trial, writable as deterministic CSV."""

    rows: list = field(default_factory=list)

    def append(self, **kwargs) -> None:
        self.rows.append([kwargs[c] for c in _LOG_COLUMNS])

    def column(self, name: str) -> np.ndarray:
        i = _LOG_COLUMNS.index(name)
        vals = [r[i] for r in self.rows]
        if name == "stage":
            return np.asarray(vals, dtype=object)
        return np.asarray(vals, dtype=float)

    def columns(self, *names: str) -> np.ndarray:
        return np.column_stack([self.column(n) for n in names])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(_LOG_COLUMNS) + "\n")
            for row in self.rows:
                cells = []
                for col, val in zip(_LOG_COLUMNS, row):
                    if col == "stage":
                        cells.append(val)
                    elif col in ("tick", "spectrum_id"):
                        cells.append(str(int(val)))
                    else:
                        cells.append(repr(float(val)))
                fh.write(",".join(cells) + "\n")


@dataclass
class SpectraBlock:
    """Spectrometer captures from one trial, aligned with log spectrum ids."""

    t: np.ndarray
    heights: np.ndarray
    materials: np.ndarray
    raw: np.ndarray
    intensity: np.ndarray
    fingerprints: np.ndarray
    grid: sp.WavelengthGrid
    white: np.ndarray
    dark: np.ndarray

    def __len__(self) -> int:
        return self.t.shape[0]

    def write_csv(self, path) -> None:
        """Wide CSV: wavelength_nm, white, dark, then one column per capture."""
        with open(path, "w", newline="") as fh:
            header = ["wavelength_nm", "white", "dark"] + [
                f"s{i:04d}" for i in range(len(self))
            ]
            fh.write(",".join(header) + "\n")
            wl = self.grid.wavelengths
            for c in range(wl.size):
                cells = [repr(float(wl[c])), repr(float(self.white[c])), repr(float(self.dark[c]))]
                cells += [repr(float(self.raw[i, c])) for i in range(len(self))]
                fh.write(",".join(cells) + "\n")


@dataclass
class TrialResult:
    trial_index: int
    log: TrialLog
    spectra: SpectraBlock
    summary: dict


def run_trial(
    scene: Scene,
    estimator,
    config: ControlConfig,
    command: ScanCommand,
    start_position,
    sensors: SensorSuite,
    optics: dict,
    seed: int,
    trial_index: int = 0,
    white: sp.Spectrum | None = None,
    dark: sp.Spectrum | None = None,
) -> TrialResult:
    """Simulate one scan trial end to end.

    Sensor noise, height noise and spectrometer noise each draw from their
    own seed substream keyed by trial index, so trials are independent and
    the whole run is reproducible bit for bit.
    """
    rng_features = substream(seed, "features", trial_index)
    rng_height = substream(seed, "height", trial_index)
    rng_spectrum = substream(seed, "spectrum", trial_index)

    grid = sp.DEFAULT_GRID
    white = white if white is not None else sp.default_white(grid)
    dark = dark if dark is not None else sp.default_dark(grid)

    controller = HybridController(estimator.predict, config, command)
    state = SceneState(scene=scene, position=np.asarray(start_position, dtype=float))
    dt = config.dt
    n_ticks = int(math.ceil(config.timeout * config.control_rate)) + 1
    spectro_every = max(1, int(round(config.control_rate / config.spectro_rate)))

    log = TrialLog()
    spec_t, spec_h, spec_mat, spec_raw = [], [], [], []
    n_dropouts = 0
    min_gap = math.inf
    max_gap = -math.inf
    transition_truth: dict | None = None

    for tick in range(n_ticks):
        t = tick * dt
        truth = ground_truth_features(state)
        contact = contact_height(state)
        min_gap = min(min_gap, contact.height)
        max_gap = max(max_gap, contact.height)

        measurement_tick = tick % config.ticks_per_measurement == 0
        meas = None
        if measurement_tick:
            meas = measure_features(state, sensors.feature_noise, rng_features, t)
            if meas is None:
                n_dropouts += 1
        profile = sensors.height_profile(contact.material)
        h_meas = measure_height(state, profile, rng_height)

        prev_stage = controller.stage
        decision = controller.update(t, meas, measurement_tick, h_meas)
        if prev_stage is Stage.APPROACH and decision.stage is Stage.SCANNING:
            # true errors at the moment the stage machine declared arrival
            start_px = np.asarray(command.start, dtype=float)
            transition_truth = {
                "tip_err_px": float(np.linalg.norm(truth[:2] - start_px)),
                "light_err_px": float(np.linalg.norm(truth[2:] - start_px)),
                "height_err_mm": float(abs(contact.height - config.h_star)),
            }

        spectrum_id = -1
        if decision.stage is Stage.SCANNING and tick % spectro_every == 0:
            mat_optics = optics[scene.surface.materials[contact.material].optics]
            raw = sp.synthesize_raw(mat_optics, contact.height, white, dark, rng_spectrum)
            spectrum_id = len(spec_raw)
            spec_t.append(t)
            spec_h.append(contact.height)
            spec_mat.append(contact.material)
            spec_raw.append(raw.values)

        meas_arr = meas.as_array() if meas is not None else np.full(4, np.nan)
        filt_arr = decision.filtered if decision.filtered is not None else np.full(4, np.nan)
        action = decision.action
        zero3 = np.zeros(3)
        a_vs = action.visual if action is not None else zero3
        a_hc = action.height if action is not None else zero3
        beta = action.beta if action is not None else np.nan
        log.append(
            tick=tick,
            t=t,
            stage=decision.stage.value,
            true_u_tip=truth[0], true_v_tip=truth[1],
            true_u_light=truth[2], true_v_light=truth[3],
            meas_u_tip=meas_arr[0], meas_v_tip=meas_arr[1],
            meas_u_light=meas_arr[2], meas_v_light=meas_arr[3],
            filt_u_tip=filt_arr[0], filt_v_tip=filt_arr[1],
            filt_u_light=filt_arr[2], filt_v_light=filt_arr[3],
            u_star=decision.target[0], v_star=decision.target[1],
            h_true=contact.height, h_meas=h_meas, beta=beta,
            avs_x=a_vs[0], avs_y=a_vs[1], avs_z=a_vs[2],
            ahc_x=a_hc[0], ahc_y=a_hc[1], ahc_z=a_hc[2],
            a_x=decision.command[0], a_y=decision.command[1], a_z=decision.command[2],
            x=state.position[0], y=state.position[1], z=state.position[2],
            spectrum_id=spectrum_id,
        )

        if decision.stage in (Stage.DONE, Stage.FAILED):
            break
        try:
            state = step(state, decision.command, dt)
        except OffTissueError:
            controller._fail(t, "off_tissue")
            break

    n_spectra = len(spec_raw)
    block = SpectraBlock(
        t=np.asarray(spec_t, dtype=float),
        heights=np.asarray(spec_h, dtype=float),
        materials=np.asarray(spec_mat, dtype=int),
        raw=np.asarray(spec_raw, dtype=float).reshape(n_spectra, grid.n_channels),
        intensity=np.zeros(n_spectra),
        fingerprints=np.zeros((n_spectra, 0)),
        grid=grid,
        white=white.values,
        dark=dark.values,
    )
    if n_spectra:
        intens, fps = [], []
        for i in range(n_spectra):
            raw_spec = sp.Spectrum(grid=grid, values=block.raw[i], role="raw")
            mu_i, mu_f, _ = sp.process_spectrum(raw_spec, white, dark)
            intens.append(mu_i)
            fps.append(mu_f)
        block.intensity = np.asarray(intens)
        block.fingerprints = np.asarray(fps)

    final_contact = contact_height(state)
    summary = {
        "trial_index": trial_index,
        "seed": seed,
        "final_stage": controller.stage.value,
        "fail_reason": controller.fail_reason,
        "n_ticks": len(log.rows),
        "duration_s": float((len(log.rows) - 1) * dt),
        "approach_time_s": controller.approach_time,
        "done_time_s": controller.done_time,
        "terminal_gap_mm": float(final_contact.height),
        "min_gap_mm": float(min_gap),
        "max_gap_mm": float(max_gap),
        "n_dropouts": int(n_dropouts),
        "n_spectra": int(n_spectra),
        "kf_repairs": int(
            (controller.tip_track.repairs if controller.tip_track else 0)
            + (controller.light_track.repairs if controller.light_track else 0)
        ),
        "final_position": [float(v) for v in state.position],
        "transition_truth": transition_truth,
    }
    return TrialResult(trial_index=trial_index, log=log, spectra=block, summary=summary)


# ---------------------------------------------------------------------------
# plain IBVS rollout (no noise, no stages) for controller analysis
# ---------------------------------------------------------------------------


def ibvs_rollout(
    scene: Scene,
    start_position,
    target_px,
    inverse_jacobian_fn,
    gain: float = 0.8,
    dt: float = 1.0 / 30.0,
    duration: float = 12.0,
    speed_limit: float | None = None,
):
    """Drive the noiseless 4-feature error to a fixed image target.

    `inverse_jacobian_fn(state, features)` supplies the 3x4 inverse map each
    tick; pass the analytic oracle or a fitted estimator's predict.  Returns
    (times, error_norms, positions).
    """
    state = SceneState(scene=scene, position=np.asarray(start_position, dtype=float))
    target = np.asarray(target_px, dtype=float)
    n = int(round(duration / dt))
    times = np.empty(n)
    errors = np.empty(n)
    positions = np.empty((n, 3))
    for k in range(n):
        s = ground_truth_features(state)
        e = np.concatenate([s[:2] - target, s[2:] - target])
        times[k] = k * dt
        errors[k] = float(np.linalg.norm(e))
        positions[k] = state.position
        v = ibvs_velocity(inverse_jacobian_fn(state, s), e, gain, speed_limit)
        state = step(state, v, dt)
    return times, errors, positions
