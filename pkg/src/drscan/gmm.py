"""Gaussian mixture fitting by expectation-maximization.

Initialization is k-means++; covariances carry a diagonal floor so EM stays
numerically safe on degenerate data; components that starve are re-seeded from
the point farthest from the surviving means (a bounded number of times).
Everything is deterministic given ``random_state``.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from .validation import as_float_array, check_non_negative, check_positive

_LOG_2PI = float(np.log(2.0 * np.pi))


class FitError(RuntimeError):
    """Mixture fitting could not produce a usable model."""


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centers with D^2 sampling."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest_sq = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(closest_sq.sum())
        if total <= 0:
            # all remaining points coincide with a chosen center
            centers[i] = x[rng.integers(n)]
            continue
        idx = rng.choice(n, p=closest_sq / total)
        centers[i] = x[idx]
        closest_sq = np.minimum(closest_sq, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def _farthest_point(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return x[int(np.argmax(d2.min(axis=1)))]


def lloyd_kmeans(
    x,
    k: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iterations from a k-means++ start. Returns (centers, labels)."""
    x = as_float_array(x, "x")
    if x.ndim != 2 or x.shape[0] < k:
        raise ValueError(f"need at least k={k} points of equal dimension, got {x.shape}")
    centers = kmeans_plus_plus(x, k, rng)
    labels = _assign(x, centers)
    for _ in range(max_iter):
        new_centers = centers.copy()
        for j in range(k):
            mask = labels == j
            if not np.any(mask):
                new_centers[j] = _farthest_point(x, new_centers)
            else:
                new_centers[j] = x[mask].mean(axis=0)
        shift = float(np.max(np.sum((new_centers - centers) ** 2, axis=1)))
        centers = new_centers
        labels = _assign(x, centers)
        if shift <= tol:
            break
    return centers, labels


def _component_log_density(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    diff = (x - mean).T
    white = solve_triangular(chol, diff, lower=True)
    maha = np.sum(white**2, axis=0)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (x.shape[1] * _LOG_2PI + log_det + maha)


class GaussianMixtureModel(BaseEstimator):
    """Full-covariance Gaussian mixture fitted by EM.

    Parameters
    ----------
    n_components : number of Gaussians K.
    tol : EM stops when the mean per-sample log-likelihood gain drops below this.
    max_iter : EM iteration cap.
    covariance_floor : added to every covariance diagonal each M-step.
    reseed_limit : how many starved-component re-seeds are allowed per fit.
    random_state : seed for the k-means++ initialization.
    """

    def __init__(
        self,
        n_components: int = 5,
        tol: float = 1e-6,
        max_iter: int = 300,
        covariance_floor: float = 1e-6,
        reseed_limit: int = 5,
        random_state: int = 0,
    ):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.covariance_floor = covariance_floor
        self.reseed_limit = reseed_limit
        self.random_state = random_state

    # ---- internals ----

    def _validate_x(self, x) -> np.ndarray:
        x = as_float_array(x, "x")
        if x.ndim != 2:
            raise ValueError(f"x must be 2-D (n_samples, n_features), got shape {x.shape}")
        return x

    def _weighted_log_prob(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((x.shape[0], self.n_components))
        for j in range(self.n_components):
            out[:, j] = np.log(self.weights_[j]) + _component_log_density(
                x, self.means_[j], self.covariances_[j]
            )
        return out

    def _m_step(self, x: np.ndarray, resp: np.ndarray) -> None:
        n = x.shape[0]
        mass = resp.sum(axis=0)
        self.weights_ = mass / n
        floor_eye = self.covariance_floor * np.eye(x.shape[1])
        for j in range(self.n_components):
            if mass[j] <= 0:
                continue  # caller re-seeds starved components
            mu = resp[:, j] @ x / mass[j]
            diff = x - mu
            cov = (resp[:, j] * diff.T) @ diff / mass[j]
            self.means_[j] = mu
            self.covariances_[j] = 0.5 * (cov + cov.T) + floor_eye

    def _reseed(self, x: np.ndarray, j: int) -> None:
        self.means_[j] = _farthest_point(x, self.means_)
        global_cov = np.cov(x.T, bias=True).reshape(x.shape[1], x.shape[1])
        self.covariances_[j] = global_cov + self.covariance_floor * np.eye(x.shape[1])
        self.weights_[j] = 1.0 / x.shape[0]
        self.weights_ /= self.weights_.sum()

    def _floor_active(self) -> bool:
        """True when some covariance sits at the diagonal floor.  The floor
        turns the M-step into a constrained update, so the usual EM ascent
        guarantee only holds while it is slack."""
        for cov in self.covariances_:
            if np.linalg.eigvalsh(cov)[0] <= 10.0 * self.covariance_floor:
                return True
        return False

    # ---- estimator API ----

    def fit(self, x, y=None) -> "GaussianMixtureModel":
        x = self._validate_x(x)
        check_positive(self.tol, "tol")
        check_non_negative(self.covariance_floor, "covariance_floor")
        if not 1 <= self.n_components <= x.shape[0]:
            raise ValueError(
                f"n_components must be in [1, n_samples={x.shape[0]}], got {self.n_components}"
            )
        rng = np.random.default_rng(self.random_state)
        n, d = x.shape

        centers = kmeans_plus_plus(x, self.n_components, rng)
        labels = _assign(x, centers)
        resp = np.zeros((n, self.n_components))
        resp[np.arange(n), labels] = 1.0
        self.weights_ = np.full(self.n_components, 1.0 / self.n_components)
        self.means_ = centers.copy()
        self.covariances_ = np.empty((self.n_components, d, d))
        self._m_step(x, resp)
        for j in range(self.n_components):
            if resp[:, j].sum() <= 0:
                self._reseed(x, j)

        self.log_likelihoods_ = []
        self.converged_ = False
        reseeds = 0
        prev_ll = -np.inf
        for iteration in range(self.max_iter):
            weighted = self._weighted_log_prob(x)
            norm = logsumexp(weighted, axis=1)
            ll = float(np.mean(norm))
            # EM guarantee: the objective never decreases (float slack only).
            if ll < prev_ll - 1e-9 * max(1.0, abs(prev_ll)):
                if self._floor_active():
                    # Data concentrated on a lower-dimensional manifold pushes
                    # a covariance onto the floor; the constrained update can
                    # then dip by O(floor).  Treat that as converged.
                    self.converged_ = True
                    break
                raise FitError(
                    f"log-likelihood decreased at iteration {iteration}: {prev_ll} -> {ll}"
                )
            self.log_likelihoods_.append(ll)
            resp = np.exp(weighted - norm[:, None])

            starved = [j for j in range(self.n_components) if resp[:, j].sum() < 1e-10]
            if starved:
                reseeds += len(starved)
                if reseeds > self.reseed_limit:
                    raise FitError(
                        f"{reseeds} component re-seeds exceeded the limit of {self.reseed_limit}"
                    )
                for j in starved:
                    self._reseed(x, j)
                prev_ll = -np.inf  # objective restarts after a re-seed
                continue

            if ll - prev_ll < self.tol and np.isfinite(prev_ll):
                self.converged_ = True
                break
            prev_ll = ll
            self._m_step(x, resp)

        self.n_iter_ = len(self.log_likelihoods_)
        self.responsibilities_ = resp
        return self

    def predict_proba(self, x) -> np.ndarray:
        """Posterior p(z = k | x), shape (n, K)."""
        x = self._validate_x(x)
        weighted = self._weighted_log_prob(x)
        return np.exp(weighted - logsumexp(weighted, axis=1)[:, None])

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def score_samples(self, x) -> np.ndarray:
        x = self._validate_x(x)
        return logsumexp(self._weighted_log_prob(x), axis=1)
