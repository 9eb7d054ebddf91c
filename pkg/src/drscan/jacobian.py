"""Learning the inverse image Jacobian from scripted excitation runs.

The probe is driven along closed-form calibration paths while the two image
features (tip pixel, light-centre pixel) are logged noiselessly.  Feature
rates come from finite differences, and local linear maps v = X @ sdot are
fitted per mixture component in feature space; blending the maps with soft
mixture posteriors gives a smooth global estimate of the inverse Jacobian.
A k-means variant with hard switching is kept as a baseline, and the exact
interaction-matrix pseudo-inverse as ground truth.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .gmm import GaussianMixtureModel, lloyd_kmeans, _assign
from .scene import Scene, SceneState, features_for_positions, light_centre_position
from .validation import as_float_array, check_positive

# Finite-difference scheme identifier stored with every dataset: central
# differences inside, second-order one-sided at the ends.  The one-sided
# order matters; first-order endpoints dominate the fit residual otherwise.
DIFF_SCHEME = "central+onesided2"

ESTIMATOR_FORMAT_VERSION = 1


class RankDeficientCluster(RuntimeError):
    """A cluster has too few points or too little excitation to fit a map."""


# ---------------------------------------------------------------------------
# excitation paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lissajous:
    """Lissajous sweep at a nominal height above the surface point under the
    pattern centre, with an optional vertical wobble so each episode excites
    all three velocity axes.  Position and velocity are closed-form, so
    sampled trajectories carry no integration error."""

    center: tuple[float, float]
    height: float
    amplitude: tuple[float, float]
    freq: tuple[float, float] = (0.36, 0.27)
    phase: float = 1.5707963267948966
    duration: float = 15.0
    vertical_amplitude: float = 0.0
    vertical_freq: float = 0.55

    def path(self, t: np.ndarray, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center
        ax, ay = self.amplitude
        fx, fy = self.freq
        az, fz = self.vertical_amplitude, self.vertical_freq
        z0 = scene.surface.height(cx, cy) + self.height
        pos = np.empty((t.size, 3))
        vel = np.empty((t.size, 3))
        pos[:, 0] = cx + ax * np.sin(fx * t + self.phase) - ax * np.sin(self.phase)
        pos[:, 1] = cy + ay * np.sin(fy * t)
        pos[:, 2] = z0 + az * np.sin(fz * t)
        vel[:, 0] = ax * fx * np.cos(fx * t + self.phase)
        vel[:, 1] = ay * fy * np.cos(fy * t)
        vel[:, 2] = az * fz * np.cos(fz * t)
        return pos, vel


@dataclass(frozen=True)
class VerticalChirp:
    """Vertical sinusoid with linearly swept frequency, riding on a slow
    lateral orbit.  The orbit matters: a constant lateral drift would leave
    the episode's velocities in a 2-D subspace and local map fits around it
    rank deficient."""

    center: tuple[float, float]
    height: float
    amplitude: float
    freq_start: float = 0.8
    freq_end: float = 1.6
    duration: float = 10.0
    orbit: tuple[float, float] = (3.0, 3.0)
    orbit_freq: float = 0.5

    def path(self, t: np.ndarray, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center
        f0, f1 = self.freq_start, self.freq_end
        theta = f0 * t + (f1 - f0) * t**2 / (2.0 * self.duration)
        omega = f0 + (f1 - f0) * t / self.duration
        ox, oy = self.orbit
        of = self.orbit_freq
        z_mid = scene.surface.height(cx, cy) + self.height
        pos = np.empty((t.size, 3))
        vel = np.empty((t.size, 3))
        pos[:, 0] = cx + ox * np.sin(of * t)
        pos[:, 1] = cy + oy * np.sin(of * t + 1.0) - oy * np.sin(1.0)
        pos[:, 2] = z_mid + self.amplitude * np.sin(theta)
        vel[:, 0] = ox * of * np.cos(of * t)
        vel[:, 1] = oy * of * np.cos(of * t + 1.0)
        vel[:, 2] = self.amplitude * omega * np.cos(theta)
        return pos, vel


@dataclass(frozen=True)
class LinePath:
    """Constant-velocity segment, mostly useful in tests: the feature rate
    along it should match the analytic Jacobian times the velocity."""

    start: tuple[float, float, float]
    velocity: tuple[float, float, float]
    duration: float = 2.0

    def path(self, t: np.ndarray, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
        p0 = np.asarray(self.start, dtype=float)
        v = np.asarray(self.velocity, dtype=float)
        pos = p0[None, :] + t[:, None] * v[None, :]
        vel = np.broadcast_to(v, pos.shape).copy()
        return pos, vel


def standard_excitation(
    scene: Scene,
    center: tuple[float, float] | None = None,
    span: float = 40.0,
    heights: tuple[float, ...] = (2.0, 8.0, 16.0),
) -> list:
    """Default calibration script: one Lissajous per height plus three
    vertical chirps (near contact, mid, high)."""
    if center is None:
        center = (scene.surface.x_max / 2.0, scene.surface.y_max / 2.0)
    half = span / 2.0
    episodes: list = []
    # lateral peak speed is half * hypot(fx, fy); freq norms of 0.45 with
    # span 40 plus the vertical wobble stay under the 10 mm/s scene limit.
    # The wobble keeps every feature-space region excited in all 3 axes.
    freqs = [(0.36, 0.27), (0.30, 0.335), (0.40, 0.205)]
    wobble = [(1.5, 0.53), (1.5, 0.61), (1.5, 0.47)]
    for h, f, (az, fz) in zip(heights, freqs, wobble):
        episodes.append(
            Lissajous(
                center=center,
                height=h,
                amplitude=(half, half),
                freq=f,
                vertical_amplitude=az,
                vertical_freq=fz,
            )
        )
    episodes.append(
        VerticalChirp(center=(center[0] - 8.0, center[1]), height=1.5, amplitude=1.2)
    )
    episodes.append(VerticalChirp(center=center, height=8.0, amplitude=6.0))
    episodes.append(
        VerticalChirp(
            center=(center[0] + 8.0, center[1] + 6.0),
            height=14.0,
            amplitude=6.0,
            freq_start=0.6,
            freq_end=1.3,
            orbit=(4.0, 4.0),
        )
    )
    return episodes


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def finite_difference_rates(values: np.ndarray, dt: float) -> np.ndarray:
    """Time derivative of uniformly sampled rows: central differences inside,
    second-order one-sided stencils at both ends.  Needs at least 3 rows."""
    values = as_float_array(values, "values")
    if values.ndim != 2 or values.shape[0] < 3:
        raise ValueError(f"need a (n>=3, m) array, got shape {values.shape}")
    check_positive(dt, "dt")
    rates = np.empty_like(values)
    rates[1:-1] = (values[2:] - values[:-2]) / (2.0 * dt)
    rates[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * dt)
    rates[-1] = (3.0 * values[-1] - 4.0 * values[-2] + values[-3]) / (2.0 * dt)
    return rates


@dataclass(frozen=True)
class Episode:
    """One excitation run: aligned samples of time, features s, feature rates
    sdot, probe positions and commanded velocities."""

    t: np.ndarray
    features: np.ndarray
    feature_rates: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        n = self.t.shape[0]
        for name, arr, width in (
            ("features", self.features, 4),
            ("feature_rates", self.feature_rates, 4),
            ("positions", self.positions, 3),
            ("velocities", self.velocities, 3),
        ):
            if arr.shape != (n, width):
                raise ValueError(f"{name} must have shape ({n}, {width}), got {arr.shape}")

    def __len__(self) -> int:
        return self.t.shape[0]


@dataclass(frozen=True)
class TrajectoryDataset:
    episodes: tuple[Episode, ...]
    dt: float
    diff_scheme: str = DIFF_SCHEME

    def __len__(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenate all episodes into (features, feature_rates, velocities)."""
        s = np.concatenate([ep.features for ep in self.episodes])
        sdot = np.concatenate([ep.feature_rates for ep in self.episodes])
        v = np.concatenate([ep.velocities for ep in self.episodes])
        return s, sdot, v

    def fingerprint(self) -> str:
        """Content hash of the sampled data, stored with fitted estimators."""
        h = hashlib.sha256()
        h.update(f"dt={self.dt!r};scheme={self.diff_scheme};n={len(self.episodes)}".encode())
        for ep in self.episodes:
            for arr in (ep.t, ep.features, ep.feature_rates, ep.positions, ep.velocities):
                h.update(str(arr.shape).encode())
                h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
            h.update(b"T" if ep.truncated else b"F")
        return h.hexdigest()


def collect_dataset(
    scene: Scene,
    excitations: list,
    dt: float = 1.0 / 30.0,
    margin_px: float = 12.0,
) -> TrajectoryDataset:
    """Sample each excitation path on a uniform grid and log noiseless
    features.  Episodes are truncated at the first sample whose features
    leave the image margin; paths must stay above the tissue and inside the
    workspace, and may not exceed the scene speed limit."""
    check_positive(dt, "dt")
    episodes = []
    surface = scene.surface
    for i, exc in enumerate(excitations):
        n = int(np.floor(exc.duration / dt)) + 1
        t = np.arange(n) * dt
        pos, vel = exc.path(t, scene)

        speed = np.linalg.norm(vel, axis=1)
        if np.any(speed > scene.speed_limit + 1e-9):
            raise ValueError(
                f"excitation {i} commands {speed.max():.2f} mm/s, "
                f"above the {scene.speed_limit} mm/s limit"
            )
        if np.any(pos[:, 0] < 0) or np.any(pos[:, 0] > surface.x_max) or np.any(
            pos[:, 1] < 0
        ) or np.any(pos[:, 1] > surface.y_max):
            raise ValueError(f"excitation {i} leaves the workspace")
        gap = pos[:, 2] - surface.height(pos[:, 0], pos[:, 1])
        if np.any(gap <= 0):
            raise ValueError(f"excitation {i} dips below the tissue surface")

        feats = features_for_positions(scene, pos)
        w, hgt = scene.third_person.image_size
        inside = (
            (feats[:, 0::2] >= margin_px).all(axis=1)
            & (feats[:, 0::2] <= w - margin_px).all(axis=1)
            & (feats[:, 1::2] >= margin_px).all(axis=1)
            & (feats[:, 1::2] <= hgt - margin_px).all(axis=1)
        )
        cut = n if bool(inside.all()) else int(np.argmin(inside))
        if cut < 3:
            raise ValueError(f"excitation {i} leaves the image after {cut} samples")
        truncated = cut < n
        t, pos, vel, feats = t[:cut], pos[:cut], vel[:cut], feats[:cut]
        rates = finite_difference_rates(feats, dt)
        episodes.append(
            Episode(
                t=t,
                features=feats,
                feature_rates=rates,
                positions=pos,
                velocities=vel,
                truncated=truncated,
            )
        )
    return TrajectoryDataset(episodes=tuple(episodes), dt=dt)


# ---------------------------------------------------------------------------
# analytic interaction matrix
# ---------------------------------------------------------------------------


def interaction_matrix(state: SceneState) -> np.ndarray:
    """Exact 4x3 image Jacobian d[features]/d[probe velocity] at the current
    pose.  Rows 0-1: tip pixel; rows 2-3: light-centre pixel, whose world
    point slides along the surface under the tip (hence the slope coupling)."""
    cam = state.scene.third_person
    rot = cam.rotation
    f = cam.focal

    def point_block(world_point: np.ndarray) -> np.ndarray:
        x, y, z = cam.camera_coords(world_point)
        return np.array([[f / z, 0.0, -f * x / z**2], [0.0, f / z, -f * y / z**2]])

    tip = np.asarray(state.position, dtype=float)
    light = light_centre_position(state)
    gx, gy = state.scene.surface.gradient(tip[0], tip[1])
    # light point: (x, y, g(x, y)); its z follows the surface, not the probe
    slope = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [gx, gy, 0.0]])
    top = point_block(tip) @ rot
    bottom = point_block(light) @ rot @ slope
    return np.vstack([top, bottom])


def analytic_inverse_jacobian(state: SceneState) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of the exact interaction matrix (3x4)."""
    return np.linalg.pinv(interaction_matrix(state))


# ---------------------------------------------------------------------------
# local linear maps
# ---------------------------------------------------------------------------


def fit_local_maps(
    feature_rates: np.ndarray,
    velocities: np.ndarray,
    labels: np.ndarray,
    n_clusters: int,
    ridge: float = 1e-8,
    min_points: int = 8,
    rank_tol: float = 1e-2,
) -> np.ndarray:
    """Least-squares maps X_k with v ~= X_k @ sdot, one per cluster.

    Feature rates live on a 3-D velocity manifold, so the 4-column design
    matrix is rank deficient by construction.  Solving through its SVD and
    keeping only directions with singular value >= rank_tol * largest keeps
    the noise-dominated fourth direction out of the maps; plain normal
    equations would amplify it.  Ridge damping is applied inside the retained
    subspace only.
    """
    sdot = as_float_array(feature_rates, "feature_rates", shape=(-1, 4))
    v = as_float_array(velocities, "velocities", shape=(-1, 3))
    if sdot.shape[0] != v.shape[0]:
        raise ValueError("feature_rates and velocities disagree on sample count")
    labels = np.asarray(labels)
    maps = np.empty((n_clusters, 3, 4))
    for k in range(n_clusters):
        mask = labels == k
        count = int(mask.sum())
        if count < min_points:
            raise RankDeficientCluster(
                f"cluster {k} has {count} samples, fewer than the minimum {min_points}"
            )
        u, sig, wt = np.linalg.svd(sdot[mask], full_matrices=False)
        keep = sig >= rank_tol * sig[0]
        if int(keep.sum()) < 3:
            raise RankDeficientCluster(
                f"cluster {k} spans only {int(keep.sum())} feature-rate directions "
                f"(singular values {sig.tolist()}); excitation is too thin there"
            )
        gain = sig[keep] / (sig[keep] ** 2 + ridge)
        maps[k] = (v[mask].T @ u[:, keep]) * gain @ wt[keep]
    return maps


def _softmax_rows(scores: np.ndarray, temperature: float) -> np.ndarray:
    z = scores / temperature
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


class GmmLlsJacobian(BaseEstimator):
    """Inverse-Jacobian estimator: mixture model over features, one local
    linear map per component, soft blending by tempered posteriors.

    ``predict`` accepts a single feature vector (4,) or a batch (n, 4) and
    returns the blended 3x4 inverse map(s).
    """

    def __init__(
        self,
        n_clusters: int = 5,
        temperature: float = 1.0,
        ridge: float = 1e-8,
        covariance_floor: float = 1e-6,
        tol: float = 1e-6,
        max_iter: int = 300,
        min_cluster_points: int = 8,
        rank_tol: float = 1e-2,
        random_state: int = 0,
    ):
        self.n_clusters = n_clusters
        self.temperature = temperature
        self.ridge = ridge
        self.covariance_floor = covariance_floor
        self.tol = tol
        self.max_iter = max_iter
        self.min_cluster_points = min_cluster_points
        self.rank_tol = rank_tol
        self.random_state = random_state

    def fit(self, features, feature_rates, velocities) -> "GmmLlsJacobian":
        s = as_float_array(features, "features", shape=(-1, 4))
        check_positive(self.temperature, "temperature")
        self.gmm_ = GaussianMixtureModel(
            n_components=self.n_clusters,
            tol=self.tol,
            max_iter=self.max_iter,
            covariance_floor=self.covariance_floor,
            random_state=self.random_state,
        ).fit(s)
        # hard assignment for the map fits, soft posteriors for blending
        labels = np.argmax(self.gmm_.predict_proba(s), axis=1)
        self.maps_ = fit_local_maps(
            feature_rates,
            velocities,
            labels,
            self.n_clusters,
            ridge=self.ridge,
            min_points=self.min_cluster_points,
            rank_tol=self.rank_tol,
        )
        self.labels_ = labels
        return self

    def blend_weights(self, features) -> np.ndarray:
        s = as_float_array(features, "features", shape=(-1, 4))
        posterior = self.gmm_.predict_proba(s)
        return _softmax_rows(posterior, self.temperature)

    def predict(self, features) -> np.ndarray:
        s = np.asarray(features, dtype=float)
        single = s.ndim == 1
        w = self.blend_weights(s.reshape(-1, 4))
        out = np.einsum("nk,kij->nij", w, self.maps_)
        return out[0] if single else out


class KMeansLlsJacobian(BaseEstimator):
    """Baseline: k-means clusters with hard nearest-centre switching between
    the local maps.  Discontinuous across cluster boundaries by design."""

    def __init__(
        self,
        n_clusters: int = 5,
        ridge: float = 1e-8,
        min_cluster_points: int = 8,
        rank_tol: float = 1e-2,
        random_state: int = 0,
    ):
        self.n_clusters = n_clusters
        self.ridge = ridge
        self.min_cluster_points = min_cluster_points
        self.rank_tol = rank_tol
        self.random_state = random_state

    def fit(self, features, feature_rates, velocities) -> "KMeansLlsJacobian":
        s = as_float_array(features, "features", shape=(-1, 4))
        rng = np.random.default_rng(self.random_state)
        self.centers_, labels = lloyd_kmeans(s, self.n_clusters, rng)
        self.maps_ = fit_local_maps(
            feature_rates,
            velocities,
            labels,
            self.n_clusters,
            ridge=self.ridge,
            min_points=self.min_cluster_points,
            rank_tol=self.rank_tol,
        )
        self.labels_ = labels
        return self

    def predict(self, features) -> np.ndarray:
        s = np.asarray(features, dtype=float)
        single = s.ndim == 1
        labels = _assign(s.reshape(-1, 4), self.centers_)
        out = self.maps_[labels]
        return out[0] if single else out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "dtype": "float64",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_array(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    arr = np.frombuffer(raw, dtype=np.dtype(blob["dtype"]))
    return arr.reshape(blob["shape"]).copy()


def save_estimator(
    estimator,
    path,
    seed: int | None = None,
    dataset_fingerprint: str | None = None,
) -> None:
    """Write a fitted estimator to versioned JSON.  Arrays are base64-encoded
    row-major float64, so load/save round-trips are bit-exact."""
    if isinstance(estimator, GmmLlsJacobian):
        kind = "gmm_lls"
        arrays = {
            "weights": _encode_array(estimator.gmm_.weights_),
            "means": _encode_array(estimator.gmm_.means_),
            "covariances": _encode_array(estimator.gmm_.covariances_),
            "maps": _encode_array(estimator.maps_),
        }
    elif isinstance(estimator, KMeansLlsJacobian):
        kind = "kmeans_lls"
        arrays = {
            "centers": _encode_array(estimator.centers_),
            "maps": _encode_array(estimator.maps_),
        }
    else:
        raise TypeError(f"cannot persist estimator of type {type(estimator).__name__}")
    doc = {
        "format_version": ESTIMATOR_FORMAT_VERSION,
        "kind": kind,
        "params": estimator.get_params(),
        "arrays": arrays,
        "provenance": {"seed": seed, "dataset_fingerprint": dataset_fingerprint},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_estimator(path):
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != ESTIMATOR_FORMAT_VERSION:
        raise ValueError(
            f"unsupported estimator format version {version!r}, "
            f"expected {ESTIMATOR_FORMAT_VERSION}"
        )
    kind = doc["kind"]
    arrays = doc["arrays"]
    if kind == "gmm_lls":
        est = GmmLlsJacobian(**doc["params"])
        gmm = GaussianMixtureModel(
            n_components=est.n_clusters,
            tol=est.tol,
            max_iter=est.max_iter,
            covariance_floor=est.covariance_floor,
            random_state=est.random_state,
        )
        gmm.weights_ = _decode_array(arrays["weights"])
        gmm.means_ = _decode_array(arrays["means"])
        gmm.covariances_ = _decode_array(arrays["covariances"])
        est.gmm_ = gmm
        est.maps_ = _decode_array(arrays["maps"])
    elif kind == "kmeans_lls":
        est = KMeansLlsJacobian(**doc["params"])
        est.centers_ = _decode_array(arrays["centers"])
        est.maps_ = _decode_array(arrays["maps"])
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    return est
