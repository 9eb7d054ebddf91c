"""Shared fixtures.  The calibrated estimator is expensive (~10 s), so it is
built once per session and reused by the control and acceptance tests."""
import pytest

from drscan import jacobian, presets


@pytest.fixture(scope="session")
def default_scene():
    return presets.make_scene("default")


@pytest.fixture(scope="session")
def linear_scene():
    return presets.make_scene("linear_regime")


@pytest.fixture(scope="session")
def default_dataset(default_scene):
    episodes = jacobian.standard_excitation(default_scene)
    return jacobian.collect_dataset(default_scene, episodes)


@pytest.fixture(scope="session")
def fitted_estimator(default_dataset):
    features, rates, velocities = default_dataset.stacked()
    est = jacobian.GmmLlsJacobian(random_state=0)
    est.fit(features, rates, velocities)
    return est


@pytest.fixture(scope="session")
def trial_batch(default_scene, fitted_estimator):
    """Three completed trials on the default phantom, as TrialData."""
    from drscan import control, evaluation

    cfg = presets.control_preset("stomach_phantom")
    command = presets.default_command_line(default_scene)
    sensors = presets.sensor_suite(default_scene)
    trials = []
    for i in range(3):
        result = control.run_trial(
            default_scene, fitted_estimator, cfg, command,
            presets.DEFAULT_START_POSITION, sensors, presets.OPTICS,
            seed=400, trial_index=i,
        )
        trials.append(evaluation.trial_data_from_result(result))
    return trials, command
