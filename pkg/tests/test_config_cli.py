"""Config parsing/validation and the command-line workflow end to end."""
import json

import numpy as np
import pytest

from drscan import presets
from drscan.cli import git_blob_sha1, main
from drscan.config import (
    CalibrationSettings,
    ConfigError,
    ExperimentConfig,
    ManualSettings,
)
from drscan.control import run_trial
from drscan.evaluation import load_trial_dir, trial_data_from_result
from drscan.jacobian import save_estimator


class TestConfigParsing:
    def test_empty_doc_gives_defaults(self):
        cfg = ExperimentConfig.from_dict({})
        assert cfg == ExperimentConfig()
        assert cfg.preset == "default"
        assert cfg.seed == 0
        assert cfg.min_success_rate == 0.85

    def test_format_version_gate(self):
        with pytest.raises(ConfigError, match="format_version"):
            ExperimentConfig.from_dict({"format_version": 2})
        ExperimentConfig.from_dict({"format_version": 1})

    @pytest.mark.parametrize(
        "doc, fragment",
        [
            ({"sedd": 3}, "sedd"),
            ({"control": {"gian": 2.0}}, "gian"),
            ({"calibration": {"clusters": 4}}, "clusters"),
            ({"manual": {"tremor": 1.0}}, "tremor"),
            ({"line": {"world": [[0, 0], [1, 1]], "frame": "px"}}, "frame"),
        ],
    )
    def test_unknown_keys_rejected_everywhere(self, doc, fragment):
        with pytest.raises(ConfigError, match=fragment):
            ExperimentConfig.from_dict(doc)

    def test_sensors_enum(self):
        assert ExperimentConfig.from_dict({"sensors": "noiseless"}).sensors == "noiseless"
        with pytest.raises(ConfigError, match="sensors"):
            ExperimentConfig.from_dict({"sensors": "perfect"})

    def test_calibration_estimator_enum(self):
        cfg = ExperimentConfig.from_dict({"calibration": {"estimator": "kmeans"}})
        assert cfg.calibration.estimator == "kmeans"
        with pytest.raises(ConfigError, match="estimator"):
            ExperimentConfig.from_dict({"calibration": {"estimator": "forest"}})

    def test_line_needs_exactly_one_frame(self):
        with pytest.raises(ConfigError, match="exactly one"):
            ExperimentConfig.from_dict(
                {"line": {"world": [[0, 0], [1, 1]], "px": [[0, 0], [1, 1]]}}
            )
        with pytest.raises(ConfigError, match="exactly one"):
            ExperimentConfig.from_dict({"line": {}})
        with pytest.raises(ConfigError, match="must be"):
            ExperimentConfig.from_dict({"line": {"px": [1, 2, 3, 4]}})
        cfg = ExperimentConfig.from_dict({"line": {"px": [[1, 2], [3, 4]]}})
        assert cfg.line == {"px": [[1.0, 2.0], [3.0, 4.0]]}

    def test_start_position_shape(self):
        with pytest.raises(ConfigError, match="start_position"):
            ExperimentConfig.from_dict({"start_position": [1.0, 2.0]})
        cfg = ExperimentConfig.from_dict({"start_position": [1, 2, 3]})
        assert cfg.start_position == (1.0, 2.0, 3.0)

    def test_seed_and_repeats_must_be_integers(self):
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig.from_dict({"seed": True})
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig.from_dict({"seed": "7"})
        with pytest.raises(ConfigError, match="repeats"):
            ExperimentConfig.from_dict({"repeats": 2.5})

    def test_min_success_rate_range(self):
        with pytest.raises(ConfigError, match="min_success_rate"):
            ExperimentConfig.from_dict({"min_success_rate": 1.5})
        assert ExperimentConfig.from_dict({"min_success_rate": 0}).min_success_rate == 0.0

    def test_load_rejects_bad_json(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            ExperimentConfig.load(p)

    def test_default_calibration_and_manual_blocks(self):
        cfg = ExperimentConfig()
        assert cfg.calibration == CalibrationSettings()
        assert cfg.manual == ManualSettings()
        model = cfg.manual.model()
        assert model.sigma_hand == presets.HAND_TREMOR_SIGMA
        assert model.duration == 30.0


class TestConfigResolution:
    def test_control_overrides_apply(self):
        cfg = ExperimentConfig.from_dict(
            {"preset": "liver_phantom", "control": {"gain": 1.5, "timeout": 9.0}}
        )
        ctl = cfg.make_control()
        assert ctl.gain == 1.5
        assert ctl.timeout == 9.0
        assert ctl.h_star == -2.0  # preset value survives the partial override

    def test_invalid_override_value_is_a_config_error(self):
        cfg = ExperimentConfig.from_dict({"control": {"alpha": 2.0}})
        with pytest.raises(ConfigError, match="override"):
            cfg.make_control()

    def test_unknown_preset_is_a_config_error(self):
        cfg = ExperimentConfig.from_dict({"preset": "spleen"})
        with pytest.raises(ConfigError):
            cfg.make_control()
        cfg2 = ExperimentConfig.from_dict({"scene": "spleen"})
        with pytest.raises(ConfigError):
            cfg2.make_scene()

    def test_scene_dict_requires_path(self):
        cfg = ExperimentConfig.from_dict({"scene": {}})
        with pytest.raises(ConfigError, match="path"):
            cfg.make_scene()

    def test_world_line_resolution(self):
        assert ExperimentConfig().world_line() == presets.COMMAND_WORLD
        cfg = ExperimentConfig.from_dict(
            {"line": {"world": [[10, 20], [30, 40]]}}
        )
        assert cfg.world_line() == ((10.0, 20.0), (30.0, 40.0))
        px_only = ExperimentConfig.from_dict({"line": {"px": [[0, 0], [1, 1]]}})
        with pytest.raises(ConfigError, match="world-frame"):
            px_only.world_line()

    def test_pixel_line_becomes_command_directly(self, default_scene):
        cfg = ExperimentConfig.from_dict({"line": {"px": [[100, 200], [300, 200]]}})
        cmd = cfg.make_command(default_scene)
        assert cmd.start == (100.0, 200.0)
        assert cmd.end == (300.0, 200.0)

    def test_effective_repeats(self):
        assert ExperimentConfig.from_dict({"repeats": 3}).effective_repeats() == 3
        assert (
            ExperimentConfig.from_dict({"preset": "lamb_liver"}).effective_repeats()
            == presets.PRESET_REPEATS["lamb_liver"]
        )
        assert ExperimentConfig().effective_repeats() == 5

    def test_describe_is_json_ready(self):
        doc = ExperimentConfig.from_dict({"preset": "rump_steak"}).describe()
        text = json.dumps(doc)  # must not raise
        back = json.loads(text)
        assert back["repeats"] == presets.PRESET_REPEATS["rump_steak"]
        assert back["control"]["h_star"] == 0.0
        assert back["control"]["alpha"] == 0.4


# ---------------------------------------------------------------------------
# command-line workflow
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_ws(tmp_path_factory, fitted_estimator, default_dataset):
    """A workspace with a saved estimator and a small config pointing at it."""
    root = tmp_path_factory.mktemp("cli")
    est_path = root / "estimator.json"
    save_estimator(
        fitted_estimator, est_path, seed=0,
        dataset_fingerprint=default_dataset.fingerprint(),
    )
    cfg = {
        "preset": "stomach_phantom",
        "seed": 77,
        "repeats": 2,
        "estimator_path": str(est_path),
        "manual": {"repeats": 1, "duration": 12.0},
    }
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    return {"root": root, "cfg": str(cfg_path), "est": est_path}


class TestCliWorkflow:
    def test_run_writes_trial_and_resolved_config(self, cli_ws):
        out = cli_ws["root"] / "run"
        rc = main(["run", "--config", cli_ws["cfg"], "--out", str(out)])
        assert rc == 0
        assert (out / "trial_0000" / "log.csv").exists()
        assert (out / "trial_0000" / "spectra.csv").exists()
        summary = json.loads((out / "trial_0000" / "summary.json").read_text())
        assert summary["final_stage"] == "done"
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["preset"] == "stomach_phantom"
        assert resolved["estimator_sha1"] == git_blob_sha1(
            cli_ws["est"].read_bytes()
        )
        assert len(resolved["command_px"]) == 2

    def test_run_is_reproducible_byte_for_byte(self, cli_ws):
        out2 = cli_ws["root"] / "run2"
        assert main(["run", "--config", cli_ws["cfg"], "--out", str(out2)]) == 0
        base = cli_ws["root"] / "run"
        for name in ("log.csv", "spectra.csv", "summary.json"):
            a = (base / "trial_0000" / name).read_bytes()
            b = (out2 / "trial_0000" / name).read_bytes()
            assert a == b, name

    def test_trial_round_trips_through_disk(self, cli_ws, default_scene,
                                            fitted_estimator):
        result = run_trial(
            default_scene, fitted_estimator,
            presets.control_preset("stomach_phantom"),
            presets.default_command_line(default_scene),
            presets.DEFAULT_START_POSITION,
            presets.sensor_suite(default_scene), presets.OPTICS,
            seed=77, trial_index=0,
        )
        mem = trial_data_from_result(result)
        disk = load_trial_dir(cli_ws["root"] / "run" / "trial_0000")
        for col in ("t", "x", "y", "z", "h_true"):
            assert np.array_equal(mem.log[col], disk.log[col]), col
        assert list(mem.log["stage"]) == list(disk.log["stage"])
        assert np.array_equal(mem.raw, disk.raw)
        assert np.array_equal(mem.fingerprints, disk.fingerprints)
        assert mem.summary["done_time_s"] == disk.summary["done_time_s"]

    def test_batch_manual_report_plot_chain(self, cli_ws):
        root = cli_ws["root"]
        assert main(["batch", "--config", cli_ws["cfg"],
                     "--out", str(root / "batch")]) == 0
        stats = json.loads((root / "batch" / "batch_summary.json").read_text())
        assert stats["n_trials"] == 2
        assert stats["n_done"] == 2

        assert main(["manual", "--config", cli_ws["cfg"],
                     "--out", str(root / "manual")]) == 0
        assert (root / "manual" / "manual_0000" / "spectra.csv").exists()

        assert main(["report", str(root / "batch"),
                     "--manual", str(root / "manual"),
                     "--out", str(root / "rep")]) == 0
        report = json.loads((root / "rep" / "report.json").read_text())
        assert report["manual_vs_auto"]["reference_batch"] == "stomach_phantom"
        assert (root / "rep" / "report.csv").exists()

        assert main(["plot", str(root / "rep" / "report.json"),
                     "--out", str(root / "rep" / "plots")]) == 0
        svgs = list((root / "rep" / "plots").glob("*.svg"))
        assert svgs, "plot command produced no SVGs"

    def test_exit_codes(self, cli_ws, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"sedd": 1}))
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o1")]) == 2

        assert main(["run", "--config", cli_ws["cfg"],
                     "--line", "1,2,3",
                     "--out", str(tmp_path / "o2")]) == 2

        missing = tmp_path / "missing_est.json"
        cfg = tmp_path / "cfg_missing.json"
        cfg.write_text(json.dumps({"estimator_path": str(missing)}))
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o3")]) == 4

        hopeless = tmp_path / "cfg_timeout.json"
        hopeless.write_text(json.dumps({
            "preset": "stomach_phantom",
            "seed": 77,
            "estimator_path": str(cli_ws["est"]),
            "control": {"timeout": 0.5},
        }))
        assert main(["run", "--config", str(hopeless),
                     "--out", str(tmp_path / "o4")]) == 3

    def test_argparse_level_errors(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "drscan" in capsys.readouterr().out
