"""Autonomous diffuse reflectance spectroscopy scanning, simulated end to end.

The package covers the full loop: a deformable tissue scene with cameras and
a probe, feature extraction with realistic sensor noise, a learned inverse
Jacobian (mixture model plus local linear maps), the hybrid visual/height
controller, the spectrometer pipeline, and batch evaluation with reports.
"""

from .config import ConfigError, ExperimentConfig
from .control import (
    ControlConfig,
    HybridController,
    ScanCommand,
    Stage,
    TrialResult,
    blend_weight,
    command_from_world,
    ibvs_rollout,
    run_trial,
)
from .gmm import FitError, GaussianMixtureModel
from .jacobian import (
    GmmLlsJacobian,
    KMeansLlsJacobian,
    Lissajous,
    LinePath,
    RankDeficientCluster,
    TrajectoryDataset,
    VerticalChirp,
    analytic_inverse_jacobian,
    collect_dataset,
    interaction_matrix,
    load_estimator,
    save_estimator,
    standard_excitation,
)
from .perception import FeatureNoiseModel, HeightSensorProfile, SensorSuite
from .presets import (
    OPTICS,
    SAMPLE_PRESETS,
    control_preset,
    default_command_line,
    make_scene,
    scene_names,
    sensor_suite,
)
from .scene import OffTissueError, PinholeCamera, Scene, SceneState, load_scene, save_scene
from .seeding import substream
from .spectra import (
    DEFAULT_GRID,
    MaterialOptics,
    Spectrum,
    WavelengthGrid,
    calibrate,
    process_spectrum,
    synthesize_raw,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ControlConfig",
    "DEFAULT_GRID",
    "ExperimentConfig",
    "FeatureNoiseModel",
    "FitError",
    "GaussianMixtureModel",
    "GmmLlsJacobian",
    "HeightSensorProfile",
    "HybridController",
    "KMeansLlsJacobian",
    "LinePath",
    "Lissajous",
    "MaterialOptics",
    "OPTICS",
    "OffTissueError",
    "PinholeCamera",
    "RankDeficientCluster",
    "SAMPLE_PRESETS",
    "ScanCommand",
    "Scene",
    "SceneState",
    "SensorSuite",
    "Spectrum",
    "Stage",
    "TrajectoryDataset",
    "TrialResult",
    "VerticalChirp",
    "WavelengthGrid",
    "analytic_inverse_jacobian",
    "blend_weight",
    "calibrate",
    "collect_dataset",
    "command_from_world",
    "control_preset",
    "default_command_line",
    "ibvs_rollout",
    "interaction_matrix",
    "load_estimator",
    "load_scene",
    "make_scene",
    "process_spectrum",
    "run_trial",
    "save_estimator",
    "save_scene",
    "scene_names",
    "sensor_suite",
    "standard_excitation",
    "substream",
    "synthesize_raw",
    "__version__",
]
