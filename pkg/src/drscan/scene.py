"""Desk-scale scene geometry for a probe-over-tissue simulator.

Units are mm (world lengths), px (image coordinates), and seconds throughout.
World frame: x/y span the tissue plane, z points up. Camera frame: z forward,
x right, y down, so pixel v grows downward in the image.

The scene carries two pinhole cameras: a fixed oblique third-person view (the
one the feature controller works in) and a wrist camera rigidly mounted above
the probe tip looking down (the geometry behind the contact-height sensor).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .validation import as_float_array, check_non_negative, check_positive

SCENE_FORMAT_VERSION = 1
SCENE_UNITS = "mm (world lengths), px (image coordinates), s (time); heights indexed [iy][ix]"


class BehindCameraError(ValueError):
    """A point to be projected lies at or behind the camera plane."""


class OffTissueError(RuntimeError):
    """The probe left the lateral bounds of the tissue surface."""


def _look_at_rotation(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World->camera rotation whose rows are the camera axes (x right, y down, z forward)."""
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position and look-at target coincide")
    z_cam = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    x_cam = np.cross(z_cam, up)
    if np.linalg.norm(x_cam) < 1e-9:
        # straight-down (or straight-up) view: pick image-x along world-x
        x_cam = np.array([1.0, 0.0, 0.0])
    x_cam = x_cam / np.linalg.norm(x_cam)
    y_cam = np.cross(z_cam, x_cam)
    return np.stack([x_cam, y_cam, z_cam])


@dataclass(frozen=True)
class PinholeCamera:
    """Ideal pinhole camera defined by position + look-at point.

    ``focal`` is in pixels; ``principal`` is (c_u, c_v); ``image_size`` is
    (width, height) in pixels.
    """

    focal: float
    principal: tuple[float, float]
    image_size: tuple[int, int]
    position: np.ndarray
    look_at: np.ndarray
    rotation: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        check_positive(self.focal, "focal")
        object.__setattr__(self, "position", as_float_array(self.position, "position", (3,)))
        object.__setattr__(self, "look_at", as_float_array(self.look_at, "look_at", (3,)))
        object.__setattr__(self, "rotation", _look_at_rotation(self.position, self.look_at))

    def camera_coords(self, points) -> np.ndarray:
        pts = as_float_array(points, "points")
        return (pts - self.position) @ self.rotation.T

    def project(self, points) -> np.ndarray:
        """Project world points (..., 3) to pixel coordinates (..., 2).

        Raises BehindCameraError when any point has non-positive depth.
        """
        cam = self.camera_coords(points)
        depth = cam[..., 2]
        if np.any(depth <= 1e-9):
            raise BehindCameraError(
                f"point at depth {float(np.min(depth)):.3g} mm is behind the camera"
            )
        uv = self.focal * cam[..., :2] / depth[..., None]
        return uv + np.asarray(self.principal)

    def contains(self, pixels, margin: float = 0.0) -> np.ndarray:
        px = np.asarray(pixels, dtype=float)
        w, h = self.image_size
        return (
            (px[..., 0] >= margin)
            & (px[..., 0] <= w - 1 - margin)
            & (px[..., 1] >= margin)
            & (px[..., 1] <= h - 1 - margin)
        )

    def to_dict(self) -> dict:
        return {
            "focal": float(self.focal),
            "principal": [float(v) for v in self.principal],
            "image_size": [int(v) for v in self.image_size],
            "position": [float(v) for v in self.position],
            "look_at": [float(v) for v in self.look_at],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PinholeCamera":
        return cls(
            focal=d["focal"],
            principal=tuple(d["principal"]),
            image_size=tuple(d["image_size"]),
            position=np.array(d["position"], dtype=float),
            look_at=np.array(d["look_at"], dtype=float),
        )


@dataclass(frozen=True)
class MaterialInfo:
    """Per-material bindings: optical curve id and height-sensor noise profile id."""

    name: str
    optics: str
    height_noise: str

    def to_dict(self) -> dict:
        return {"name": self.name, "optics": self.optics, "height_noise": self.height_noise}

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialInfo":
        return cls(name=d["name"], optics=d["optics"], height_noise=d["height_noise"])


@dataclass(frozen=True)
class TissueSurface:
    """Rest heightfield on a regular grid with bilinear interpolation.

    ``heights`` has shape (ny, nx) sampled at x = x0 + j*spacing,
    y = y0 + i*spacing. ``material_map`` assigns a material id per grid cell,
    shape (ny-1, nx-1). ``max_compression`` bounds how far the probe may sink
    below the rest surface.
    """

    origin: tuple[float, float]
    spacing: float
    heights: np.ndarray
    material_map: np.ndarray
    materials: dict[int, MaterialInfo]
    max_compression: float = 3.0

    def __post_init__(self):
        check_positive(self.spacing, "spacing")
        check_non_negative(self.max_compression, "max_compression")
        heights = as_float_array(self.heights, "heights")
        if heights.ndim != 2 or heights.shape[0] < 2 or heights.shape[1] < 2:
            raise ValueError(f"heights must be (ny>=2, nx>=2), got {heights.shape}")
        object.__setattr__(self, "heights", heights)
        mat = np.asarray(self.material_map, dtype=int)
        if mat.shape != (heights.shape[0] - 1, heights.shape[1] - 1):
            raise ValueError(
                f"material_map must be {(heights.shape[0] - 1, heights.shape[1] - 1)}, got {mat.shape}"
            )
        missing = set(np.unique(mat)) - set(self.materials)
        if missing:
            raise ValueError(f"material_map references undefined material ids {sorted(missing)}")
        object.__setattr__(self, "material_map", mat)

    @property
    def x_max(self) -> float:
        return self.origin[0] + self.spacing * (self.heights.shape[1] - 1)

    @property
    def y_max(self) -> float:
        return self.origin[1] + self.spacing * (self.heights.shape[0] - 1)

    def contains(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (
            (x >= self.origin[0]) & (x <= self.x_max) & (y >= self.origin[1]) & (y <= self.y_max)
        )

    def _cell(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if not np.all(self.contains(x, y)):
            raise OffTissueError(f"query point outside tissue bounds [{self.origin}..({self.x_max}, {self.y_max})]")
        fx = (x - self.origin[0]) / self.spacing
        fy = (y - self.origin[1]) / self.spacing
        j = np.clip(fx.astype(int), 0, self.heights.shape[1] - 2)
        i = np.clip(fy.astype(int), 0, self.heights.shape[0] - 2)
        return i, j, fx - j, fy - i

    def height(self, x, y) -> np.ndarray:
        """Bilinear rest height g(x, y)."""
        i, j, tx, ty = self._cell(x, y)
        h00 = self.heights[i, j]
        h01 = self.heights[i, j + 1]
        h10 = self.heights[i + 1, j]
        h11 = self.heights[i + 1, j + 1]
        return (
            h00 * (1 - tx) * (1 - ty)
            + h01 * tx * (1 - ty)
            + h10 * (1 - tx) * ty
            + h11 * tx * ty
        )

    def gradient(self, x, y) -> np.ndarray:
        """(dg/dx, dg/dy) of the bilinear patch, shape (..., 2)."""
        i, j, tx, ty = self._cell(x, y)
        h00 = self.heights[i, j]
        h01 = self.heights[i, j + 1]
        h10 = self.heights[i + 1, j]
        h11 = self.heights[i + 1, j + 1]
        gx = ((h01 - h00) * (1 - ty) + (h11 - h10) * ty) / self.spacing
        gy = ((h10 - h00) * (1 - tx) + (h11 - h01) * tx) / self.spacing
        return np.stack([gx, gy], axis=-1)

    def material_at(self, x, y) -> np.ndarray:
        i, j, _, _ = self._cell(x, y)
        return self.material_map[i, j]

    def to_dict(self) -> dict:
        return {
            "origin": [float(v) for v in self.origin],
            "spacing": float(self.spacing),
            "heights": self.heights.tolist(),
            "material_map": self.material_map.tolist(),
            "materials": {str(k): v.to_dict() for k, v in self.materials.items()},
            "max_compression": float(self.max_compression),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TissueSurface":
        return cls(
            origin=tuple(d["origin"]),
            spacing=d["spacing"],
            heights=np.array(d["heights"], dtype=float),
            material_map=np.array(d["material_map"], dtype=int),
            materials={int(k): MaterialInfo.from_dict(v) for k, v in d["materials"].items()},
            max_compression=d["max_compression"],
        )


@dataclass(frozen=True)
class Scene:
    """Static scene: surface, cameras, and the hard Cartesian speed limit."""

    surface: TissueSurface
    third_person: PinholeCamera
    wrist_focal: float = 500.0
    wrist_principal: tuple[float, float] = (160.0, 120.0)
    wrist_image_size: tuple[int, int] = (320, 240)
    wrist_offset: float = 40.0  # camera height above the probe tip, mm
    speed_limit: float = 10.0  # mm/s

    def __post_init__(self):
        check_positive(self.speed_limit, "speed_limit")
        check_positive(self.wrist_offset, "wrist_offset")

    def to_dict(self) -> dict:
        return {
            "format_version": SCENE_FORMAT_VERSION,
            "units": SCENE_UNITS,
            "surface": self.surface.to_dict(),
            "cameras": {
                "third_person": self.third_person.to_dict(),
                "wrist": {
                    "focal": float(self.wrist_focal),
                    "principal": [float(v) for v in self.wrist_principal],
                    "image_size": [int(v) for v in self.wrist_image_size],
                    "offset": float(self.wrist_offset),
                },
            },
            "speed_limit": float(self.speed_limit),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        version = d.get("format_version")
        if version != SCENE_FORMAT_VERSION:
            raise ValueError(f"unsupported scene format_version {version!r}")
        wrist = d["cameras"]["wrist"]
        return cls(
            surface=TissueSurface.from_dict(d["surface"]),
            third_person=PinholeCamera.from_dict(d["cameras"]["third_person"]),
            wrist_focal=wrist["focal"],
            wrist_principal=tuple(wrist["principal"]),
            wrist_image_size=tuple(wrist["image_size"]),
            wrist_offset=wrist["offset"],
            speed_limit=d["speed_limit"],
        )


def save_scene(scene: Scene, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene(path: str | os.PathLike) -> Scene:
    with open(path, encoding="utf-8") as fh:
        return Scene.from_dict(json.load(fh))


@dataclass(frozen=True)
class SceneState:
    """Immutable simulator state: the static scene plus the probe tip position."""

    scene: Scene
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", as_float_array(self.position, "position", (3,)))
        surf = self.scene.surface
        if not bool(surf.contains(self.position[0], self.position[1])):
            raise OffTissueError(f"probe at {self.position[:2]} is outside the tissue bounds")


def clamp_speed(v: np.ndarray, limit: float) -> np.ndarray:
    """Scale v down so that ||v|| <= limit (direction preserved)."""
    v = as_float_array(v, "velocity", (3,))
    speed = float(np.linalg.norm(v))
    if speed <= limit or speed == 0.0:
        return v
    return v * (limit / speed)


def step(state: SceneState, velocity, dt: float) -> SceneState:
    """Integrate one control period: clamp speed, move, enforce tissue limits.

    The speed clamp runs before integration; z is then clamped so the contact
    height never goes below -max_compression. Leaving the lateral bounds raises
    OffTissueError.
    """
    check_positive(dt, "dt")
    v = clamp_speed(velocity, state.scene.speed_limit)
    pos = state.position + v * dt
    surf = state.scene.surface
    if not bool(surf.contains(pos[0], pos[1])):
        raise OffTissueError(f"probe left the tissue bounds at {pos[:2]}")
    floor = float(surf.height(pos[0], pos[1])) - surf.max_compression
    if pos[2] < floor:
        pos = np.array([pos[0], pos[1], floor])
    return replace(state, position=pos)


@dataclass(frozen=True)
class Contact:
    """Contact height h (tip z minus rest surface height) and the material under the tip."""

    height: float
    material: int


def contact_height(state: SceneState) -> Contact:
    x, y, z = state.position
    surf = state.scene.surface
    return Contact(
        height=float(z - surf.height(x, y)),
        material=int(surf.material_at(x, y)),
    )


def light_centre_position(state: SceneState) -> np.ndarray:
    """Surface point vertically beneath the tip (where the probe light lands)."""
    x, y, _ = state.position
    return np.array([x, y, float(state.scene.surface.height(x, y))])


def ground_truth_features(state: SceneState) -> np.ndarray:
    """Noise-free feature vector s = (u_p, v_p, u_l, v_l) in the third-person view."""
    cam = state.scene.third_person
    tip = cam.project(state.position)
    light = cam.project(light_centre_position(state))
    return np.concatenate([tip, light])


def features_for_positions(scene: Scene, positions) -> np.ndarray:
    """Vectorized ground-truth features for tip positions (n, 3) -> (n, 4)."""
    pts = as_float_array(positions, "positions")
    surf = scene.surface
    light = pts.copy()
    light[..., 2] = surf.height(pts[..., 0], pts[..., 1])
    tip_px = scene.third_person.project(pts)
    light_px = scene.third_person.project(light)
    return np.concatenate([tip_px, light_px], axis=-1)


def wrist_camera(state: SceneState) -> PinholeCamera:
    """The wrist camera for the current pose: above the tip, looking straight down."""
    eye = state.position + np.array([0.0, 0.0, state.scene.wrist_offset])
    return PinholeCamera(
        focal=state.scene.wrist_focal,
        principal=state.scene.wrist_principal,
        image_size=state.scene.wrist_image_size,
        position=eye,
        look_at=state.position,
    )
