"""Scene geometry: heightfield, cameras, stepping, ground-truth features."""
import numpy as np
import pytest

from drscan.scene import (
    BehindCameraError,
    MaterialInfo,
    OffTissueError,
    PinholeCamera,
    Scene,
    SceneState,
    TissueSurface,
    clamp_speed,
    contact_height,
    ground_truth_features,
    light_centre_position,
    load_scene,
    save_scene,
    step,
)


def _flat_surface(level=0.0, n=4, spacing=10.0):
    heights = np.full((n, n), level)
    info = MaterialInfo(name="m", optics="m", height_noise="m")
    return TissueSurface(
        origin=(0.0, 0.0),
        spacing=spacing,
        heights=heights,
        material_map=np.zeros((n - 1, n - 1), dtype=int),
        materials={0: info},
    )


def _camera():
    return PinholeCamera(
        focal=800.0,
        principal=(320.0, 240.0),
        image_size=(640, 480),
        position=(15.0, -100.0, 80.0),
        look_at=(15.0, 15.0, 0.0),
    )


def _scene(level=0.0):
    return Scene(surface=_flat_surface(level), third_person=_camera())


class TestSurface:
    def test_height_matches_grid_nodes(self):
        heights = np.arange(16, dtype=float).reshape(4, 4)
        surf = TissueSurface(
            origin=(0.0, 0.0),
            spacing=10.0,
            heights=heights,
            material_map=np.zeros((3, 3), dtype=int),
            materials={0: MaterialInfo(name="m", optics="m", height_noise="m")},
        )
        for i in range(4):
            for j in range(4):
                assert surf.height(10.0 * j, 10.0 * i) == pytest.approx(heights[i, j])

    def test_bilinear_midpoint(self):
        heights = np.array([[0.0, 1.0], [2.0, 3.0]])
        surf = TissueSurface(
            origin=(0.0, 0.0),
            spacing=1.0,
            heights=heights,
            material_map=np.zeros((1, 1), dtype=int),
            materials={0: MaterialInfo(name="m", optics="m", height_noise="m")},
        )
        assert surf.height(0.5, 0.5) == pytest.approx(1.5)

    def test_gradient_of_plane_is_exact(self):
        x = np.arange(4) * 10.0
        xx, yy = np.meshgrid(x, x)
        surf = TissueSurface(
            origin=(0.0, 0.0),
            spacing=10.0,
            heights=0.2 * xx + 0.1 * yy,
            material_map=np.zeros((3, 3), dtype=int),
            materials={0: MaterialInfo(name="m", optics="m", height_noise="m")},
        )
        g = surf.gradient(13.0, 21.0)
        assert np.allclose(g, [0.2, 0.1])

    def test_query_outside_raises(self):
        surf = _flat_surface()
        with pytest.raises(OffTissueError):
            surf.height(-1.0, 5.0)

    def test_material_map_shape_is_checked(self):
        with pytest.raises(ValueError):
            TissueSurface(
                origin=(0.0, 0.0),
                spacing=10.0,
                heights=np.zeros((4, 4)),
                material_map=np.zeros((4, 4), dtype=int),
                materials={0: MaterialInfo(name="m", optics="m", height_noise="m")},
            )


class TestCamera:
    def test_project_point_on_axis_hits_principal(self):
        cam = _camera()
        uv = cam.project(np.asarray(cam.look_at))
        assert np.allclose(uv, cam.principal)

    def test_projection_matches_manual_pinhole(self):
        cam = _camera()
        p = np.array([20.0, 10.0, 5.0])
        c = cam.rotation @ (p - cam.position)
        expected = cam.focal * c[:2] / c[2] + np.asarray(cam.principal)
        assert np.allclose(cam.project(p), expected)

    def test_behind_camera_raises(self):
        cam = _camera()
        behind = cam.position - 10.0 * (np.asarray(cam.look_at) - cam.position)
        with pytest.raises(BehindCameraError):
            cam.project(behind)

    def test_pixel_v_grows_downward(self):
        # a point higher in the world must land at smaller v
        cam = _camera()
        low = cam.project([15.0, 15.0, 0.0])
        high = cam.project([15.0, 15.0, 10.0])
        assert high[1] < low[1]


class TestStateAndStep:
    def test_contact_height_is_z_minus_surface(self):
        scene = _scene(level=2.0)
        state = SceneState(scene=scene, position=(15.0, 15.0, 7.0))
        assert contact_height(state).height == pytest.approx(5.0)

    def test_light_centre_sits_on_surface_below_tip(self):
        scene = _scene(level=2.0)
        state = SceneState(scene=scene, position=(12.0, 18.0, 9.0))
        assert np.allclose(light_centre_position(state), [12.0, 18.0, 2.0])

    def test_light_centre_projects_below_tip(self):
        # the oblique camera sees the surface point at larger v than the tip
        scene = _scene()
        state = SceneState(scene=scene, position=(15.0, 15.0, 8.0))
        s = ground_truth_features(state)
        assert s[3] > s[1]

    def test_step_clamps_speed(self):
        scene = _scene()
        state = SceneState(scene=scene, position=(15.0, 15.0, 8.0))
        moved = step(state, (100.0, 0.0, 0.0), dt=0.1)
        assert moved.position[0] - 15.0 == pytest.approx(scene.speed_limit * 0.1)

    def test_clamp_speed_preserves_direction(self):
        v = clamp_speed(np.array([3.0, 4.0, 0.0]), 1.0)
        assert np.linalg.norm(v) == pytest.approx(1.0)
        assert v[1] / v[0] == pytest.approx(4.0 / 3.0)

    def test_step_enforces_compression_floor(self):
        scene = _scene()
        state = SceneState(scene=scene, position=(15.0, 15.0, 0.5))
        for _ in range(100):
            state = step(state, (0.0, 0.0, -scene.speed_limit), dt=0.1)
        assert contact_height(state).height == pytest.approx(-scene.surface.max_compression)

    def test_step_off_tissue_raises(self):
        scene = _scene()
        state = SceneState(scene=scene, position=(1.0, 15.0, 8.0))
        with pytest.raises(OffTissueError):
            for _ in range(100):
                state = step(state, (-scene.speed_limit, 0.0, 0.0), dt=0.1)

    def test_state_requires_position_on_tissue(self):
        with pytest.raises(OffTissueError):
            SceneState(scene=_scene(), position=(-5.0, 15.0, 8.0))


class TestSerialization:
    def test_scene_round_trip(self, tmp_path, default_scene):
        path = tmp_path / "scene.json"
        save_scene(default_scene, path)
        loaded = load_scene(path)
        assert np.array_equal(loaded.surface.heights, default_scene.surface.heights)
        assert loaded.speed_limit == default_scene.speed_limit
        assert np.array_equal(
            loaded.third_person.position, default_scene.third_person.position
        )
        state_a = SceneState(scene=default_scene, position=(40.0, 60.0, 10.0))
        state_b = SceneState(scene=loaded, position=(40.0, 60.0, 10.0))
        assert np.array_equal(
            ground_truth_features(state_a), ground_truth_features(state_b)
        )

    def test_unknown_format_version_rejected(self, tmp_path, default_scene):
        doc = default_scene.to_dict()
        doc["format_version"] = 99
        with pytest.raises(ValueError):
            Scene.from_dict(doc)
