"""Synthetic sensor models standing in for learned detectors.

The third-person feature sensor reports the probe tip and light-centre pixels
with Gaussian noise and light-centre dropout. Near contact the probe light
saturates the view, so the measured light centre collapses onto the tip pixel
(the glare field below). A constant-velocity Kalman track per feature doubles
the 15 Hz detections to the 30 Hz control rate. The contact-height sensor is a
parametric stand-in for a wrist-camera regressor with material-dependent
noise/bias profiles.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .scene import SceneState, contact_height, ground_truth_features
from .validation import as_float_array, check_non_negative, check_positive, check_unit_interval


@dataclass(frozen=True)
class FeatureVector:
    """Tip and light-centre pixels at time t."""

    tip: np.ndarray
    light: np.ndarray
    t: float

    def __post_init__(self):
        object.__setattr__(self, "tip", as_float_array(self.tip, "tip", (2,)))
        object.__setattr__(self, "light", as_float_array(self.light, "light", (2,)))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.tip, self.light])


@dataclass(frozen=True)
class FeatureNoiseModel:
    """Feature sensor error model.

    ``dropout_prob`` is the per-measurement probability that the light centre
    is not detected (the whole measurement is then absent). Below
    ``glare_full_height`` mm the probe light saturates the camera and the
    detected light centre collapses onto the overexposed blob: the tip pixel
    shifted up by ``bloom_px`` (sensor smear pulls the saturated centroid
    toward smaller v).  Fidelity returns linearly to the true centre over the
    next ``glare_fade`` mm.  ``glare_full_height <= 0`` disables glare.
    """

    sigma_pixel: float = 1.0
    dropout_prob: float = 0.01
    glare_full_height: float = 6.0
    glare_fade: float = 3.0
    bloom_px: float = 0.7

    def __post_init__(self):
        check_non_negative(self.sigma_pixel, "sigma_pixel")
        check_unit_interval(self.dropout_prob, "dropout_prob")
        check_non_negative(self.bloom_px, "bloom_px")
        if self.glare_full_height > 0:
            check_positive(self.glare_fade, "glare_fade")

    @classmethod
    def noiseless(cls) -> "FeatureNoiseModel":
        return cls(sigma_pixel=0.0, dropout_prob=0.0, glare_full_height=0.0, glare_fade=1.0)

    def glare_fidelity(self, h: float) -> float:
        """1 = light centre measured truthfully, 0 = fully swamped by probe glare."""
        if self.glare_full_height <= 0:
            return 1.0
        return float(np.clip((h - self.glare_full_height) / self.glare_fade, 0.0, 1.0))


def measure_features(
    state: SceneState,
    model: FeatureNoiseModel,
    rng: np.random.Generator,
    t: float,
) -> FeatureVector | None:
    """One detector frame, or None on light-centre dropout."""
    if model.dropout_prob > 0 and rng.uniform() < model.dropout_prob:
        return None
    s = ground_truth_features(state)
    tip, light = s[:2], s[2:]
    fidelity = model.glare_fidelity(contact_height(state).height)
    blob = tip + np.array([0.0, -model.bloom_px])
    light = fidelity * light + (1.0 - fidelity) * blob
    if model.sigma_pixel > 0:
        tip = tip + rng.normal(0.0, model.sigma_pixel, size=2)
        light = light + rng.normal(0.0, model.sigma_pixel, size=2)
    w, h_img = state.scene.third_person.image_size
    bounds = np.array([w - 1.0, h_img - 1.0])
    tip = np.clip(tip, 0.0, bounds)
    light = np.clip(light, 0.0, bounds)
    return FeatureVector(tip=tip, light=light, t=t)


# ---------- constant-velocity pixel tracking ----------

_H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])


@dataclass(frozen=True)
class KalmanTrack:
    """Constant-velocity track of one image feature: state (u, v, du, dv).

    ``q`` is the white-acceleration PSD (px^2/s^3), ``r`` the measurement
    variance (px^2). ``repairs`` counts covariance clamp events.
    """

    state: np.ndarray
    cov: np.ndarray
    q: float = 1.0
    r: float = 1.0
    repairs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "state", as_float_array(self.state, "state", (4,)))
        object.__setattr__(self, "cov", as_float_array(self.cov, "cov", (4, 4)))

    @property
    def position(self) -> np.ndarray:
        return self.state[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[2:]


def init_track(
    z, q: float = 1.0, r: float = 1.0, velocity_var: float = 400.0
) -> KalmanTrack:
    """Start a track at the first measurement with unknown velocity."""
    z = as_float_array(z, "z", (2,))
    state = np.array([z[0], z[1], 0.0, 0.0])
    meas_var = max(float(r), 1e-12)
    cov = np.diag([meas_var, meas_var, velocity_var, velocity_var])
    return KalmanTrack(state=state, cov=cov, q=q, r=r)


def _repair_covariance(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    # Symmetrize, then clamp negative eigenvalues at zero if float error broke PSD.
    sym = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals[0] >= -1e-12:
        return sym, False
    clipped = eigvecs @ np.diag(np.maximum(eigvals, 0.0)) @ eigvecs.T
    return 0.5 * (clipped + clipped.T), True


def kf_step(track: KalmanTrack, dt: float, z=None) -> KalmanTrack:
    """Predict one control period; update only when a measurement is present."""
    check_positive(dt, "dt")
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    q3, q2, q1 = dt**3 / 3.0, dt**2 / 2.0, dt
    qm = np.zeros((4, 4))
    for i in (0, 1):
        qm[i, i] = track.q * q3
        qm[i, i + 2] = qm[i + 2, i] = track.q * q2
        qm[i + 2, i + 2] = track.q * q1
    state = f @ track.state
    cov = f @ track.cov @ f.T + qm
    repairs = track.repairs
    if z is not None:
        z = as_float_array(z, "z", (2,))
        meas_var = max(track.r, 1e-12)
        innovation = z - _H @ state
        s_mat = _H @ cov @ _H.T + meas_var * np.eye(2)
        gain = cov @ _H.T @ np.linalg.inv(s_mat)
        state = state + gain @ innovation
        joseph = np.eye(4) - gain @ _H
        cov = joseph @ cov @ joseph.T + gain @ (meas_var * np.eye(2)) @ gain.T
    cov, repaired = _repair_covariance(cov)
    if repaired:
        repairs += 1
    return replace(track, state=state, cov=cov, repairs=repairs)


# ---------- contact-height sensing ----------


@dataclass(frozen=True)
class HeightSensorProfile:
    """Noise/bias profile of the image-based contact-height estimator.

    sigma(h) = sigma_base + sigma_contact * exp(-(h/contact_width)^2), and the
    same shape for bias. The near-contact inflation models materials whose
    appearance confuses the estimator right at touch.
    """

    name: str
    sigma_base: float = 0.075
    sigma_contact: float = 0.0
    bias_base: float = 0.0
    bias_contact: float = 0.0
    contact_width: float = 1.5
    rate_hz: float = 30.0

    def __post_init__(self):
        check_non_negative(self.sigma_base, "sigma_base")
        check_non_negative(self.sigma_contact, "sigma_contact")
        check_positive(self.contact_width, "contact_width")
        check_positive(self.rate_hz, "rate_hz")

    def _contact_factor(self, h: float) -> float:
        return float(np.exp(-((h / self.contact_width) ** 2)))

    def sigma(self, h: float) -> float:
        return self.sigma_base + self.sigma_contact * self._contact_factor(h)

    def bias(self, h: float) -> float:
        return self.bias_base + self.bias_contact * self._contact_factor(h)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sigma_base": self.sigma_base,
            "sigma_contact": self.sigma_contact,
            "bias_base": self.bias_base,
            "bias_contact": self.bias_contact,
            "contact_width": self.contact_width,
            "rate_hz": self.rate_hz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeightSensorProfile":
        return cls(**d)


def measure_height(
    state: SceneState,
    profile: HeightSensorProfile,
    rng: np.random.Generator,
) -> float:
    h = contact_height(state).height
    sigma = profile.sigma(h)
    noise = rng.normal(0.0, sigma) if sigma > 0 else 0.0
    return h + profile.bias(h) + noise


@dataclass(frozen=True)
class SensorSuite:
    """Everything the controller senses with: feature model + per-material height profiles."""

    feature_noise: FeatureNoiseModel
    height_profiles: dict[int, HeightSensorProfile]

    def height_profile(self, material: int) -> HeightSensorProfile:
        try:
            return self.height_profiles[material]
        except KeyError:
            raise KeyError(
                f"no height-sensor profile for material id {material}; "
                f"known ids: {sorted(self.height_profiles)}"
            ) from None

    @classmethod
    def noiseless(cls, materials=(0,)) -> "SensorSuite":
        profile = HeightSensorProfile(name="noiseless", sigma_base=0.0)
        return cls(
            feature_noise=FeatureNoiseModel.noiseless(),
            height_profiles={int(m): profile for m in materials},
        )
