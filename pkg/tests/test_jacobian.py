"""Excitation paths, finite differences, the analytic interaction matrix,
local map fitting, and estimator persistence."""
import numpy as np
import pytest

from drscan import jacobian
from drscan.jacobian import (
    GmmLlsJacobian,
    KMeansLlsJacobian,
    LinePath,
    Lissajous,
    RankDeficientCluster,
    VerticalChirp,
    analytic_inverse_jacobian,
    collect_dataset,
    finite_difference_rates,
    fit_local_maps,
    interaction_matrix,
    load_estimator,
    save_estimator,
    standard_excitation,
)
from drscan.scene import SceneState, ground_truth_features
from drscan.seeding import substream


class TestFiniteDifferences:
    def test_exact_on_quadratics(self):
        # second-order stencils everywhere, so quadratics differentiate exactly
        dt = 0.05
        t = np.arange(40) * dt
        values = np.column_stack([3.0 + 2.0 * t - 1.5 * t**2, 0.5 * t**2])
        expected = np.column_stack([2.0 - 3.0 * t, t])
        rates = finite_difference_rates(values, dt)
        assert np.allclose(rates, expected, atol=1e-10)

    def test_second_order_on_smooth_signals(self):
        t1 = np.arange(0, 1, 0.01)
        t2 = np.arange(0, 1, 0.005)
        err = []
        for t in (t1, t2):
            r = finite_difference_rates(np.sin(3.0 * t)[:, None], t[1] - t[0])
            err.append(np.max(np.abs(r[:, 0] - 3.0 * np.cos(3.0 * t))))
        assert err[0] / err[1] > 3.0  # halving dt cuts error ~4x

    def test_needs_three_samples(self):
        with pytest.raises(ValueError):
            finite_difference_rates(np.zeros((2, 4)), 0.1)


class TestExcitationPaths:
    def test_lissajous_velocity_is_path_derivative(self, default_scene):
        ep = Lissajous(center=(75.0, 75.0), height=8.0, amplitude=(20.0, 20.0),
                       vertical_amplitude=1.5)
        t = np.arange(0, 10, 1e-3)
        pos, vel = ep.path(t, default_scene)
        fd = finite_difference_rates(pos, 1e-3)
        assert np.allclose(fd, vel, atol=1e-4)

    def test_lissajous_starts_at_centre(self, default_scene):
        ep = Lissajous(center=(70.0, 80.0), height=8.0, amplitude=(20.0, 15.0))
        pos, _ = ep.path(np.array([0.0]), default_scene)
        z0 = default_scene.surface.height(70.0, 80.0) + 8.0
        assert np.allclose(pos[0], [70.0, 80.0, z0])

    def test_chirp_velocity_is_path_derivative(self, default_scene):
        ep = VerticalChirp(center=(75.0, 75.0), height=8.0, amplitude=6.0)
        t = np.arange(0, ep.duration, 1e-3)
        pos, vel = ep.path(t, default_scene)
        fd = finite_difference_rates(pos, 1e-3)
        assert np.allclose(fd, vel, atol=1e-3)

    def test_chirp_sweeps_frequency_upward(self, default_scene):
        ep = VerticalChirp(center=(75.0, 75.0), height=8.0, amplitude=6.0,
                           freq_start=0.8, freq_end=1.6)
        t = np.arange(0, ep.duration, 1e-3)
        _, vel = ep.path(t, default_scene)
        # envelope of vz is amplitude * omega(t), growing toward the end
        early = np.abs(vel[: len(t) // 4, 2]).max()
        late = np.abs(vel[-len(t) // 4:, 2]).max()
        assert late > 1.5 * early

    def test_standard_excitation_obeys_scene_limits(self, default_scene):
        for ep in standard_excitation(default_scene):
            t = np.arange(0, ep.duration, 1e-3)
            pos, vel = ep.path(t, default_scene)
            speeds = np.linalg.norm(vel, axis=1)
            assert speeds.max() <= default_scene.speed_limit + 1e-9
            gap = pos[:, 2] - default_scene.surface.height(pos[:, 0], pos[:, 1])
            assert gap.min() > 0

    def test_every_episode_excites_all_three_axes(self, default_dataset):
        # a velocity axis with no variance cannot be recovered by any map fit
        for ep in default_dataset.episodes:
            stds = ep.velocities.std(axis=0)
            assert np.all(stds > 1e-3), stds


class TestCollectDataset:
    def test_speed_limit_enforced(self, default_scene):
        fast = LinePath(start=(40.0, 75.0, 10.0), velocity=(20.0, 0.0, 0.0))
        with pytest.raises(ValueError, match="limit"):
            collect_dataset(default_scene, [fast])

    def test_below_surface_rejected(self, default_scene):
        digger = LinePath(start=(40.0, 75.0, 1.0), velocity=(0.0, 0.0, -1.0),
                          duration=3.0)
        with pytest.raises(ValueError, match="below"):
            collect_dataset(default_scene, [digger])

    def test_workspace_bounds_rejected(self, default_scene):
        runaway = LinePath(start=(5.0, 75.0, 10.0), velocity=(-5.0, 0.0, 0.0),
                           duration=3.0)
        with pytest.raises(ValueError, match="workspace"):
            collect_dataset(default_scene, [runaway])

    def test_features_match_ground_truth(self, default_scene):
        line = LinePath(start=(60.0, 75.0, 10.0), velocity=(5.0, 0.0, 0.0),
                        duration=1.0)
        ds = collect_dataset(default_scene, [line])
        ep = ds.episodes[0]
        state = SceneState(scene=default_scene, position=ep.positions[7])
        assert np.allclose(ep.features[7], ground_truth_features(state))

    def test_fingerprint_is_stable_and_content_sensitive(self, default_scene):
        line = LinePath(start=(60.0, 75.0, 10.0), velocity=(5.0, 0.0, 0.0),
                        duration=1.0)
        a = collect_dataset(default_scene, [line]).fingerprint()
        b = collect_dataset(default_scene, [line]).fingerprint()
        other = LinePath(start=(60.0, 75.0, 11.0), velocity=(5.0, 0.0, 0.0),
                         duration=1.0)
        c = collect_dataset(default_scene, [other]).fingerprint()
        assert a == b
        assert a != c


class TestInteractionMatrix:
    def test_matches_numerical_derivative(self, default_scene):
        state = SceneState(scene=default_scene, position=(70.0, 70.0, 9.0))
        jac = interaction_matrix(state)
        eps = 1e-5
        num = np.empty((4, 3))
        for axis in range(3):
            d = np.zeros(3)
            d[axis] = eps
            plus = ground_truth_features(
                SceneState(scene=default_scene, position=state.position + d))
            minus = ground_truth_features(
                SceneState(scene=default_scene, position=state.position - d))
            num[:, axis] = (plus - minus) / (2 * eps)
        assert np.allclose(jac, num, rtol=1e-5, atol=1e-6)

    def test_light_rows_ignore_vertical_motion_on_flat_tissue(self, default_scene):
        # flat surface: moving straight down leaves the light centre fixed
        state = SceneState(scene=default_scene, position=(70.0, 70.0, 9.0))
        jac = interaction_matrix(state)
        assert np.allclose(jac[2:, 2], 0.0, atol=1e-12)
        assert abs(jac[1, 2]) > 0.1  # the tip pixel does move

    def test_inverse_is_moore_penrose(self, default_scene):
        state = SceneState(scene=default_scene, position=(70.0, 70.0, 9.0))
        jac = interaction_matrix(state)
        inv = analytic_inverse_jacobian(state)
        assert np.allclose(inv, np.linalg.pinv(jac))
        assert np.allclose(inv @ jac, np.eye(3), atol=1e-9)


class TestLocalMaps:
    def _synthetic_cluster(self, seed, n=100):
        rng = substream(seed, "lls")
        j = rng.normal(size=(4, 3))
        v = rng.normal(size=(n, 3))
        sdot = v @ j.T
        return j, v, sdot

    def test_recovers_inverse_on_synthetic_data(self):
        j, v, sdot = self._synthetic_cluster(0)
        maps = fit_local_maps(sdot, v, np.zeros(len(v), dtype=int), 1)
        assert maps.shape == (1, 3, 4)
        assert np.allclose(maps[0] @ j, np.eye(3), atol=1e-6)
        assert np.allclose((maps[0] @ sdot.T).T, v, atol=1e-6)

    def test_rank_deficient_velocities_raise(self):
        rng = substream(1, "rank")
        j = rng.normal(size=(4, 3))
        v = rng.normal(size=(100, 3))
        v[:, 2] = 0.0  # no vertical excitation
        sdot = v @ j.T
        with pytest.raises(RankDeficientCluster, match="directions"):
            fit_local_maps(sdot, v, np.zeros(100, dtype=int), 1)

    def test_starved_cluster_raises(self):
        j, v, sdot = self._synthetic_cluster(2, n=20)
        labels = np.zeros(20, dtype=int)
        labels[:3] = 1  # 3 points < min_points
        with pytest.raises(RankDeficientCluster, match="fewer"):
            fit_local_maps(sdot, v, labels, 2)


class TestEstimators:
    def test_gmm_estimator_beats_tolerance_near_training_data(
        self, fitted_estimator, default_dataset
    ):
        s, sdot, v = default_dataset.stacked()
        take = slice(0, None, 7)
        maps = fitted_estimator.predict(s[take])
        pred = np.einsum("nij,nj->ni", maps, sdot[take])
        rel = np.linalg.norm(pred - v[take]) / np.linalg.norm(v[take])
        assert rel < 0.15

    def test_single_and_batch_predict_agree(self, fitted_estimator, default_dataset):
        s, _, _ = default_dataset.stacked()
        batch = fitted_estimator.predict(s[:10])
        singles = np.stack([fitted_estimator.predict(s[i]) for i in range(10)])
        assert np.array_equal(batch, singles)

    def test_blend_weights_are_a_distribution(self, fitted_estimator, default_dataset):
        s, _, _ = default_dataset.stacked()
        w = fitted_estimator.blend_weights(s[:50])
        assert w.shape == (50, fitted_estimator.n_clusters)
        assert np.allclose(w.sum(axis=1), 1.0)
        assert np.all(w >= 0)

    def test_kmeans_baseline_fits_same_data(self, default_dataset):
        s, sdot, v = default_dataset.stacked()
        est = KMeansLlsJacobian(random_state=0)
        est.fit(s, sdot, v)
        maps = est.predict(s[::9])
        pred = np.einsum("nij,nj->ni", maps, sdot[::9])
        rel = np.linalg.norm(pred - v[::9]) / np.linalg.norm(v[::9])
        assert rel < 0.2

    def test_predict_before_fit_raises(self):
        with pytest.raises(Exception):
            GmmLlsJacobian().predict(np.zeros(4))


class TestPersistence:
    def test_round_trip_is_exact(self, tmp_path, fitted_estimator, default_dataset):
        s, _, _ = default_dataset.stacked()
        path = tmp_path / "est.json"
        save_estimator(fitted_estimator, path, seed=0,
                       dataset_fingerprint=default_dataset.fingerprint())
        loaded = load_estimator(path)
        assert np.array_equal(loaded.predict(s[::11]), fitted_estimator.predict(s[::11]))
        assert loaded.get_params() == fitted_estimator.get_params()

    def test_save_is_deterministic(self, tmp_path, fitted_estimator):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_estimator(fitted_estimator, p1, seed=0, dataset_fingerprint="x")
        save_estimator(fitted_estimator, p2, seed=0, dataset_fingerprint="x")
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_gate(self, tmp_path, fitted_estimator):
        import json

        path = tmp_path / "est.json"
        save_estimator(fitted_estimator, path)
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="version"):
            load_estimator(path)

    def test_kmeans_round_trip(self, tmp_path, default_dataset):
        s, sdot, v = default_dataset.stacked()
        est = KMeansLlsJacobian(random_state=0)
        est.fit(s, sdot, v)
        path = tmp_path / "km.json"
        save_estimator(est, path)
        loaded = load_estimator(path)
        assert isinstance(loaded, KMeansLlsJacobian)
        assert np.array_equal(loaded.predict(s[::13]), est.predict(s[::13]))
