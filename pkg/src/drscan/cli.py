"""Command-line entry points.

Subcommands cover the whole workflow: calibrate an inverse-Jacobian
estimator, run single trials or seeded batches, generate hand-held baseline
scans, aggregate directories into a report, and render the report's plots.

Exit codes: 0 ok, 2 bad configuration or arguments, 3 trial/batch did not
meet its success bar, 4 I/O problem.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, presets
from . import spectra as sp
from .config import ConfigError, ExperimentConfig
from .control import ScanCommand, TrialResult, run_trial
from .evaluation import (
    build_report,
    load_batch_dir,
    load_trial_dir,
    simulate_manual_scan,
    summarize_batch,
    to_jsonable,
    trial_data_from_result,
    write_report_csv,
    write_report_json,
)
from .jacobian import (
    GmmLlsJacobian,
    KMeansLlsJacobian,
    collect_dataset,
    load_estimator,
    save_estimator,
    standard_excitation,
)
from .plots import render_report_plots


def git_blob_sha1(data: bytes) -> str:
    """Hash bytes the way `git hash-object` does, for cheap provenance."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "line", None) is not None:
        try:
            u0, v0, u1, v1 = (float(v) for v in args.line.split(","))
        except ValueError:
            raise ConfigError(
                f"--line must be 'u0,v0,u1,v1' in pixels, got {args.line!r}"
            ) from None
        cfg = dataclasses.replace(cfg, line={"px": [[u0, v0], [u1, v1]]})
    return cfg


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("DRSCAN_OUT") or "drscan_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _calibrate_in_process(cfg: ExperimentConfig, scene):
    cal = cfg.calibration
    dataset = collect_dataset(
        scene, standard_excitation(scene, span=cal.span, heights=cal.heights),
        dt=cal.dt,
    )
    features, rates, velocities = dataset.stacked()
    cls = GmmLlsJacobian if cal.estimator == "gmm" else KMeansLlsJacobian
    kw = dict(n_clusters=cal.n_clusters, random_state=cfg.seed)
    if cal.estimator == "gmm":
        kw["temperature"] = cal.temperature
    est = cls(**kw)
    est.fit(features, rates, velocities)
    return est, dataset


def _resolve_estimator(cfg: ExperimentConfig, scene):
    """Estimator plus provenance details for resolved_config.json."""
    if cfg.estimator_path is not None:
        path = Path(cfg.estimator_path)
        est = load_estimator(path)
        return est, {
            "estimator_path": str(path),
            "estimator_sha1": git_blob_sha1(path.read_bytes()),
        }
    est, dataset = _calibrate_in_process(cfg, scene)
    return est, {
        "estimator_path": None,
        "estimator_sha1": None,
        "calibration_fingerprint": dataset.fingerprint(),
    }


def _resolved_doc(cfg: ExperimentConfig, command: ScanCommand, extra: dict) -> dict:
    doc = cfg.describe()
    doc["version"] = __version__
    doc["command_px"] = [list(command.start), list(command.end)]
    doc.update(extra)
    return doc


def _write_trial(result: TrialResult, trial_dir: Path) -> None:
    trial_dir.mkdir(parents=True, exist_ok=True)
    result.log.write_csv(trial_dir / "log.csv")
    result.spectra.write_csv(trial_dir / "spectra.csv")
    _write_json(trial_dir / "summary.json", result.summary)


def _trial_line(summary: dict) -> str:
    stage = summary["final_stage"]
    if stage == "done":
        return (
            f"trial {summary['trial_index']:04d}: done in "
            f"{summary['done_time_s']:.2f} s (approach {summary['approach_time_s']:.2f} s), "
            f"{summary['n_spectra']} spectra"
        )
    reason = summary.get("fail_reason") or stage
    return f"trial {summary['trial_index']:04d}: {stage} ({reason})"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    cal = cfg.calibration
    scene = cfg.make_scene()
    dataset = collect_dataset(
        scene, standard_excitation(scene, span=cal.span, heights=cal.heights),
        dt=cal.dt,
    )
    features, rates, velocities = dataset.stacked()
    n = features.shape[0]
    hold = np.arange(n) % cal.holdout_every == 0
    cls = GmmLlsJacobian if cal.estimator == "gmm" else KMeansLlsJacobian
    kw = dict(n_clusters=cal.n_clusters, random_state=cfg.seed)
    if cal.estimator == "gmm":
        kw["temperature"] = cal.temperature
    est = cls(**kw)
    est.fit(features[~hold], rates[~hold], velocities[~hold])

    maps = est.predict(features[hold])
    predicted = np.einsum("nij,nj->ni", maps, rates[hold])
    residual = float(
        np.linalg.norm(predicted - velocities[hold])
        / np.linalg.norm(velocities[hold])
    )

    path = out / "estimator.json"
    save_estimator(est, path, seed=cfg.seed, dataset_fingerprint=dataset.fingerprint())
    sha = git_blob_sha1(path.read_bytes())
    print(
        f"calibrated {cal.estimator} estimator on {int((~hold).sum())} samples, "
        f"held-out relative residual {residual:.3e} ({int(hold.sum())} samples)"
    )
    print(f"wrote {path} (sha1 {sha})")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    scene = cfg.make_scene()
    estimator, est_meta = _resolve_estimator(cfg, scene)
    control = cfg.make_control()
    command = cfg.make_command(scene)
    sensors = cfg.make_sensors(scene)

    _write_json(out / "resolved_config.json", _resolved_doc(cfg, command, est_meta))
    result = run_trial(
        scene, estimator, control, command, cfg.start_position,
        sensors, presets.OPTICS, seed=cfg.seed, trial_index=0,
    )
    _write_trial(result, out / "trial_0000")
    print(_trial_line(result.summary))
    print(f"wrote {out / 'trial_0000'}")
    return 0 if result.summary["final_stage"] == "done" else 3


def _trial_task(payload):
    (scene, estimator, control, command, start, sensors, seed, index) = payload
    result = run_trial(
        scene, estimator, control, command, start, sensors,
        presets.OPTICS, seed=seed, trial_index=index,
    )
    return index, result


def cmd_batch(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    scene = cfg.make_scene()
    estimator, est_meta = _resolve_estimator(cfg, scene)
    control = cfg.make_control()
    command = cfg.make_command(scene)
    sensors = cfg.make_sensors(scene)
    repeats = cfg.effective_repeats()

    _write_json(out / "resolved_config.json", _resolved_doc(cfg, command, est_meta))

    payloads = [
        (scene, estimator, control, command, cfg.start_position, sensors, cfg.seed, i)
        for i in range(repeats)
    ]
    results: dict[int, TrialResult] = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for index, result in pool.map(_trial_task, payloads):
                results[index] = result
    else:
        for payload in payloads:
            index, result = _trial_task(payload)
            results[index] = result

    trials = []
    for index in range(repeats):
        result = results[index]
        _write_trial(result, out / f"trial_{index:04d}")
        print(_trial_line(result.summary))
        trials.append(trial_data_from_result(result))

    stats = summarize_batch(trials, command, control.h_star)
    _write_json(out / "batch_summary.json", stats)
    print(
        f"batch: {stats['n_done']}/{stats['n_trials']} done "
        f"(rate {stats['done_rate']:.2f}, required {cfg.min_success_rate:.2f})"
    )
    return 0 if stats["done_rate"] >= cfg.min_success_rate else 3


def cmd_manual(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    scene = cfg.make_scene()
    control = cfg.make_control()
    command = cfg.make_command(scene)
    (x0, y0), (x1, y1) = cfg.world_line()
    model = cfg.manual.model()

    doc = _resolved_doc(cfg, command, {"mode": "manual"})
    _write_json(out / "resolved_config.json", doc)

    for i in range(cfg.manual.repeats):
        td = simulate_manual_scan(
            scene, presets.OPTICS, (x0, y0), (x1, y1),
            control.h_star, model, seed=cfg.seed, trial_index=i,
        )
        trial_dir = out / f"manual_{i:04d}"
        trial_dir.mkdir(parents=True, exist_ok=True)
        _write_manual_log(td, trial_dir / "log.csv")
        _write_manual_spectra(td, trial_dir / "spectra.csv")
        _write_json(trial_dir / "summary.json", td.summary)
        print(
            f"manual {i:04d}: height {td.summary['height_mean_mm']:+.2f} "
            f"+/- {td.summary['height_std_mm']:.2f} mm, {td.summary['n_spectra']} spectra"
        )
    print(f"wrote {cfg.manual.repeats} manual scans to {out}")
    return 0


def _write_manual_log(td, path: Path) -> None:
    names = ["t", "x", "y", "z", "h_true", "stage"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        n = td.log["t"].shape[0]
        for k in range(n):
            cells = [repr(float(td.log[c][k])) for c in names[:-1]]
            cells.append(str(td.log["stage"][k]))
            fh.write(",".join(cells) + "\n")


def _write_manual_spectra(td, path: Path) -> None:
    n = td.raw.shape[0]
    with open(path, "w", newline="") as fh:
        header = ["wavelength_nm", "white", "dark"] + [f"s{i:04d}" for i in range(n)]
        fh.write(",".join(header) + "\n")
        for c in range(td.wavelengths.size):
            cells = [
                repr(float(td.wavelengths[c])),
                repr(float(td.white[c])),
                repr(float(td.dark[c])),
            ]
            cells += [repr(float(td.raw[i, c])) for i in range(n)]
            fh.write(",".join(cells) + "\n")


def _load_manual_dir(path: Path) -> list:
    dirs = sorted(
        p for p in path.iterdir() if p.is_dir() and p.name.startswith("manual_")
    )
    if not dirs:
        raise FileNotFoundError(f"no manual_* directories under {path}")
    return [load_trial_dir(p) for p in dirs]


def cmd_report(args) -> int:
    out = _out_dir(args)
    batches: dict[str, list] = {}
    commands: dict[str, ScanCommand] = {}
    h_stars: dict[str, float] = {}
    for batch_dir in args.batch_dirs:
        batch_dir = Path(batch_dir)
        rc = json.loads((batch_dir / "resolved_config.json").read_text())
        name = rc.get("preset", batch_dir.name)
        if name in batches:
            name = f"{name}_{batch_dir.name}"
        (u0, v0), (u1, v1) = rc["command_px"]
        batches[name] = load_batch_dir(batch_dir)
        commands[name] = ScanCommand(start=(u0, v0), end=(u1, v1))
        h_stars[name] = float(rc["control"]["h_star"])

    manual = None
    manual_reference = None
    if args.manual:
        manual_dir = Path(args.manual)
        manual = _load_manual_dir(manual_dir)
        rc = json.loads((manual_dir / "resolved_config.json").read_text())
        ref = rc.get("preset")
        manual_reference = ref if ref in batches else next(iter(batches))

    report = build_report(
        batches, commands, h_stars, manual=manual, manual_reference=manual_reference
    )
    write_report_json(report, out / "report.json")
    write_report_csv(report, out / "report.csv")
    for name in batches:
        stats = report["batches"][name]
        print(
            f"{name}: {stats['n_done']}/{stats['n_trials']} done, "
            f"line error p90 {stats['line_error_px']['p90']:.2f} px, "
            f"speed {stats['scan_speed_mm_s']['mean']:.2f} mm/s"
        )
    print(f"wrote {out / 'report.json'} and {out / 'report.csv'}")
    return 0


def cmd_plot(args) -> int:
    report_path = Path(args.report)
    report = json.loads(report_path.read_text())
    out = Path(args.out) if args.out else report_path.parent / "plots"
    out.mkdir(parents=True, exist_ok=True)
    paths = render_report_plots(report, out)
    for p in paths:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, line: bool = False) -> None:
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (default $DRSCAN_OUT or ./drscan_out)")
    if line:
        parser.add_argument("--line", help="scan line override, pixels: u0,v0,u1,v1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drscan",
        description="Autonomous DRS scanning simulator and evaluation tools.",
    )
    parser.add_argument("--version", action="version", version=f"drscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate-jacobian",
                       help="collect excitation data and fit an estimator")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="run a single trial")
    _add_common(p, line=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="run seeded repeat trials")
    _add_common(p, line=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("manual", help="simulate hand-held baseline scans")
    _add_common(p)
    p.set_defaults(func=cmd_manual)

    p = sub.add_parser("report", help="aggregate batch directories into a report")
    p.add_argument("batch_dirs", nargs="+", help="batch output directories")
    p.add_argument("--manual", help="manual scan directory for the comparison block")
    p.add_argument("--out", help="output directory (default $DRSCAN_OUT or ./drscan_out)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="render report.json into SVG plots")
    p.add_argument("report", help="path to report.json")
    p.add_argument("--out", help="plot directory (default: <report dir>/plots)")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def console_main() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console_main()
