"""Bundled scenes, materials and trial presets.

Four samples are modelled: two silicone phantoms (stomach, liver) and two
ex-vivo meats (rump steak, lamb liver).  Phantoms are flat; the meats get a
gentle sinusoidal relief.  Each sample carries its own reflectance curve and
height-sensor noise profile.  The `linear_regime` scene pushes the camera
far away so the image Jacobian is near constant over a small patch; it is
used to validate learned maps against the analytic one.
"""
from __future__ import annotations

import numpy as np

from .control import ControlConfig, ScanCommand, command_from_world
from .perception import FeatureNoiseModel, HeightSensorProfile, SensorSuite
from .scene import MaterialInfo, PinholeCamera, Scene, TissueSurface
from .spectra import DEFAULT_GRID, MaterialOptics

# ---------------------------------------------------------------------------
# reflectance curves
# ---------------------------------------------------------------------------


def _gauss(wl: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-(((wl - center) / width) ** 2))


def _sigmoid(wl: np.ndarray, center: float, width: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(wl - center) / width))


def _base_curve(kind: str) -> np.ndarray:
    wl = DEFAULT_GRID.wavelengths
    if kind == "stomach_phantom":
        b = 0.30 + 0.35 * _gauss(wl, 560.0, 90.0)
    elif kind == "liver_phantom":
        b = 0.22 + 0.30 * _gauss(wl, 620.0, 70.0)
    elif kind == "rump_steak":
        # myoglobin-like: green absorption dip, strong red edge
        b = 0.15 + 0.45 * _sigmoid(wl, 600.0, 30.0) - 0.08 * _gauss(wl, 555.0, 25.0)
    elif kind == "lamb_liver":
        b = 0.08 + 0.34 * _sigmoid(wl, 650.0, 45.0)
    else:
        raise KeyError(f"unknown optics kind {kind!r}")
    return np.clip(b, 0.02, 0.98)


OPTICS: dict[str, MaterialOptics] = {
    name: MaterialOptics(name=name, grid=DEFAULT_GRID, base=_base_curve(name))
    for name in ("stomach_phantom", "liver_phantom", "rump_steak", "lamb_liver")
}


# ---------------------------------------------------------------------------
# height sensor profiles
# ---------------------------------------------------------------------------

HEIGHT_PROFILES: dict[str, HeightSensorProfile] = {
    "stomach_phantom": HeightSensorProfile(name="stomach_phantom", sigma_base=0.09),
    # the liver phantom's glossy surface upsets the sensor near contact
    "liver_phantom": HeightSensorProfile(
        name="liver_phantom",
        sigma_base=0.075,
        sigma_contact=0.25,
        bias_contact=0.15,
        contact_width=1.5,
    ),
    "rump_steak": HeightSensorProfile(
        name="rump_steak", sigma_base=0.1, sigma_contact=0.05
    ),
    "lamb_liver": HeightSensorProfile(name="lamb_liver", sigma_base=0.075),
    # height decoded from the spectra themselves; far noisier, kept as an
    # alternative profile for comparison runs
    "spectrum_net": HeightSensorProfile(name="spectrum_net", sigma_base=1.404),
}

# manual-mode hand tremor must dominate every sensor noise floor, otherwise
# the manual-vs-autonomous comparison would measure the sensors instead
HAND_TREMOR_SIGMA = 1.0
assert all(
    HAND_TREMOR_SIGMA > p.sigma_base for p in HEIGHT_PROFILES.values() if p.name != "spectrum_net"
)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

WORKSPACE_MM = 150.0
GRID_SPACING_MM = 5.0
DEFAULT_START_POSITION = (30.0, 90.0, 25.0)

_THIRD_PERSON = dict(
    focal=800.0,
    principal=(320.0, 240.0),
    image_size=(640, 480),
    position=(75.0, -230.0, 170.0),
    look_at=(75.0, 75.0, 0.0),
)
_LINEAR_REGIME_CAMERA = dict(
    focal=9500.0,
    principal=(320.0, 240.0),
    image_size=(640, 480),
    position=(75.0, -3200.0, 2500.0),
    look_at=(75.0, 75.0, 0.0),
)


def _surface(material: str, relief_amplitude: float = 0.0, relief_wavelength: float = 60.0):
    n = int(WORKSPACE_MM / GRID_SPACING_MM) + 1
    coords = np.arange(n) * GRID_SPACING_MM
    xx, yy = np.meshgrid(coords, coords)
    heights = relief_amplitude * np.sin(2 * np.pi * xx / relief_wavelength) * np.sin(
        2 * np.pi * yy / relief_wavelength
    )
    info = MaterialInfo(name=material, optics=material, height_noise=material)
    return TissueSurface(
        origin=(0.0, 0.0),
        spacing=GRID_SPACING_MM,
        heights=heights,
        material_map=np.zeros((n - 1, n - 1), dtype=int),
        materials={0: info},
    )


_SCENE_RECIPES = {
    "stomach_phantom": ("stomach_phantom", 0.0, _THIRD_PERSON),
    "liver_phantom": ("liver_phantom", 0.0, _THIRD_PERSON),
    "rump_steak": ("rump_steak", 1.0, _THIRD_PERSON),
    "lamb_liver": ("lamb_liver", 1.0, _THIRD_PERSON),
    "linear_regime": ("stomach_phantom", 0.0, _LINEAR_REGIME_CAMERA),
}
_SCENE_RECIPES["default"] = _SCENE_RECIPES["stomach_phantom"]


def scene_names() -> list[str]:
    return sorted(_SCENE_RECIPES)


def make_scene(name: str = "default") -> Scene:
    try:
        material, relief, cam = _SCENE_RECIPES[name]
    except KeyError:
        raise KeyError(
            f"unknown scene {name!r}; available: {', '.join(scene_names())}"
        ) from None
    return Scene(
        surface=_surface(material, relief_amplitude=relief),
        third_person=PinholeCamera(**cam),
    )


def sensor_suite(scene: Scene, noiseless: bool = False) -> SensorSuite:
    """Sensors matching the scene's materials."""
    if noiseless:
        return SensorSuite.noiseless(materials=tuple(scene.surface.materials))
    profiles = {
        mid: HEIGHT_PROFILES[info.height_noise]
        for mid, info in scene.surface.materials.items()
    }
    return SensorSuite(feature_noise=FeatureNoiseModel(), height_profiles=profiles)


#: stock 60 mm scan line through the middle of the workspace, world xy
COMMAND_WORLD = ((45.0, 60.0), (105.0, 60.0))


def default_command_line(scene: Scene) -> ScanCommand:
    """The stock scan line projected into the third-person image."""
    g = scene.surface.height
    (x0, y0), (x1, y1) = COMMAND_WORLD
    return command_from_world(
        scene,
        (x0, y0, float(g(x0, y0))),
        (x1, y1, float(g(x1, y1))),
    )


# ---------------------------------------------------------------------------
# trial presets
# ---------------------------------------------------------------------------

# λ above the 0.8 textbook default: during scanning the target keeps moving
# and near contact only the beta-weighted share of the visual command acts
# laterally, so tracking lag scales as 1/(beta*gain); the servo runs hotter
_SCAN_GAIN = 4.0


def control_preset(name: str) -> ControlConfig:
    # k_blend above the 2 mm default: inside the glare band the visual branch
    # pushes mildly upward (bloom reads as compression), so the height branch
    # needs enough blend weight there to descend through to contact.  The
    # deeper the target sits, the larger the blend distance in that band and
    # the larger k has to be.
    presets = {
        "stomach_phantom": dict(h_star=0.0, alpha=0.2, k_blend=4.0),
        "liver_phantom": dict(h_star=-2.0, alpha=0.3, k_blend=6.0),
        "rump_steak": dict(h_star=0.0, alpha=0.4, k_blend=4.0),
        "lamb_liver": dict(h_star=1.0, alpha=0.2, k_blend=4.0),
    }
    presets["default"] = presets["stomach_phantom"]
    try:
        kw = presets[name]
    except KeyError:
        raise KeyError(f"unknown control preset {name!r}") from None
    return ControlConfig(gain=_SCAN_GAIN, **kw)


#: repeats used by the batch experiments, per sample
PRESET_REPEATS = {
    "stomach_phantom": 12,
    "liver_phantom": 10,
    "rump_steak": 15,
    "lamb_liver": 25,
}

SAMPLE_PRESETS = tuple(PRESET_REPEATS)
