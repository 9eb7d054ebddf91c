"""Scan-quality metrics, the hand-held baseline, and report assembly.

Metric conventions: percentiles use the nearest-rank definition (1-based
ceil(p/100 * n) into the sorted sample), standard deviations are population
(ddof=0), scan-line error is the perpendicular point-to-line distance of the
true tip pixel pooled over all scanning ticks.  Fingerprint spread is scaled
by 1e2 and fingerprint RMSE by 1e3 in reports so the tables read in whole
numbers.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import spectra as sp
from .control import ScanCommand, TrialResult
from .scene import Scene
from .seeding import substream
from .validation import as_float_array, check_positive

REPORT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# elementary statistics
# ---------------------------------------------------------------------------


def percentile_nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: value at index ceil(p/100 * n), 1-based."""
    values = np.sort(as_float_array(values, "values"))
    if values.size == 0:
        raise ValueError("percentile of an empty sample")
    if not 0 < p <= 100:
        raise ValueError(f"p must be in (0, 100], got {p}")
    rank = math.ceil(p / 100.0 * values.size)
    return float(values[rank - 1])


def line_errors_px(points, command: ScanCommand) -> np.ndarray:
    """Perpendicular distance (px) of image points to the scan line."""
    pts = as_float_array(points, "points", shape=(-1, 2))
    a = np.asarray(command.start, dtype=float)
    b = np.asarray(command.end, dtype=float)
    u = (b - a) / np.linalg.norm(b - a)
    rel = pts - a
    return np.abs(rel[:, 0] * u[1] - rel[:, 1] * u[0])


def lateral_speeds(xy, rate_hz: float) -> np.ndarray:
    """Per-tick lateral speeds (mm/s) from consecutive positions."""
    xy = as_float_array(xy, "xy", shape=(-1, 2))
    check_positive(rate_hz, "rate_hz")
    return np.linalg.norm(np.diff(xy, axis=0), axis=1) * rate_hz


def fingerprint_rmse(a, b) -> float:
    a = as_float_array(a, "a")
    b = as_float_array(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def spectral_angle(a, b) -> float:
    """Angle between two spectra in radians."""
    a = as_float_array(a, "a")
    b = as_float_array(b, "b")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("spectral angle of a zero vector")
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def fingerprint_sigma(fingerprints) -> float:
    """Mean over channels of the per-channel population std."""
    fp = as_float_array(fingerprints, "fingerprints")
    if fp.ndim != 2 or fp.shape[0] < 2:
        raise ValueError("need at least two fingerprints")
    return float(np.mean(np.std(fp, axis=0, ddof=0)))


def intensity_stats(intensities) -> dict:
    vals = as_float_array(intensities, "intensities")
    if vals.size == 0:
        raise ValueError("no intensities")
    out = {f"p{p}": percentile_nearest_rank(vals, p) for p in (5, 25, 50, 75, 95)}
    out["mean"] = float(vals.mean())
    out["iqr"] = out["p75"] - out["p25"]
    return out


# ---------------------------------------------------------------------------
# loading trial directories back in
# ---------------------------------------------------------------------------


@dataclass
class TrialData:
    """One trial as the metrics see it: summary, log columns, spectra."""

    summary: dict
    log: dict            # column name -> np.ndarray (stage is dtype=object)
    wavelengths: np.ndarray | None
    raw: np.ndarray | None
    white: np.ndarray | None
    dark: np.ndarray | None
    intensity: np.ndarray
    fingerprints: np.ndarray


def trial_data_from_result(result: TrialResult) -> TrialData:
    log = {name: result.log.column(name) for name in _log_column_names(result.log)}
    blk = result.spectra
    return TrialData(
        summary=result.summary,
        log=log,
        wavelengths=blk.grid.wavelengths,
        raw=blk.raw,
        white=blk.white,
        dark=blk.dark,
        intensity=blk.intensity,
        fingerprints=blk.fingerprints,
    )


def _log_column_names(log) -> list[str]:
    from .control import _LOG_COLUMNS

    return list(_LOG_COLUMNS)


def load_trial_dir(path) -> TrialData:
    path = Path(path)
    summary = json.loads((path / "summary.json").read_text())
    log: dict = {}
    with open(path / "log.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols: list[list] = [[] for _ in header]
        for row in reader:
            for c, cell in zip(cols, row):
                c.append(cell)
    for name, cells in zip(header, cols):
        if name == "stage":
            log[name] = np.asarray(cells, dtype=object)
        else:
            log[name] = np.asarray(cells, dtype=float)

    spectra_path = path / "spectra.csv"
    wavelengths = raw = white = dark = None
    intensity = np.zeros(0)
    fingerprints = np.zeros((0, 0))
    if spectra_path.exists():
        table = np.genfromtxt(spectra_path, delimiter=",", skip_header=1)
        table = np.atleast_2d(table)
        wavelengths = table[:, 0]
        white = table[:, 1]
        dark = table[:, 2]
        raw = table[:, 3:].T.copy()
        if raw.size:
            grid = sp.WavelengthGrid(
                start=float(wavelengths[0]),
                stop=float(wavelengths[-1]),
                step=float(wavelengths[1] - wavelengths[0]),
            )
            white_s = sp.Spectrum(grid=grid, values=white, role="white")
            dark_s = sp.Spectrum(grid=grid, values=dark, role="dark")
            ints, fps = [], []
            for i in range(raw.shape[0]):
                mu_i, mu_f, _ = sp.process_spectrum(
                    sp.Spectrum(grid=grid, values=raw[i], role="raw"), white_s, dark_s
                )
                ints.append(mu_i)
                fps.append(mu_f)
            intensity = np.asarray(ints)
            fingerprints = np.asarray(fps)
    return TrialData(
        summary=summary,
        log=log,
        wavelengths=wavelengths,
        raw=raw,
        white=white,
        dark=dark,
        intensity=intensity,
        fingerprints=fingerprints,
    )


def load_batch_dir(path) -> list[TrialData]:
    path = Path(path)
    trials = sorted(p for p in path.iterdir() if p.is_dir() and p.name.startswith("trial_"))
    if not trials:
        raise FileNotFoundError(f"no trial_* directories under {path}")
    return [load_trial_dir(p) for p in trials]


# ---------------------------------------------------------------------------
# hand-held baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManualOperatorModel:
    """Stochastic stand-in for a clinician guiding the probe by hand.

    Contact height and lateral wobble follow Ornstein-Uhlenbeck processes
    (exact discretization, so the statistics do not depend on the tick rate).
    The operator presses slightly into the tissue on average and the tremor
    dwarfs every sensor noise floor, which is the point of the comparison.
    """

    mean_offset: float = -0.5       # mm, habitual over-pressing
    sigma_hand: float = 1.0         # mm, stationary height tremor
    tau_height: float = 0.8         # s
    sigma_perp: float = 2.0         # mm, off-line wander
    tau_perp: float = 1.5           # s
    speed_jitter: float = 0.2       # fractional along-track speed variation
    tau_speed: float = 1.0          # s
    duration: float = 30.0          # s
    rate: float = 30.0              # Hz
    spectro_rate: float = 10.0      # Hz


def _ou_step(x: float, mean: float, sigma: float, tau: float, dt: float,
             rng: np.random.Generator) -> float:
    decay = math.exp(-dt / tau)
    return mean + (x - mean) * decay + sigma * math.sqrt(1.0 - decay**2) * rng.normal()


def simulate_manual_scan(
    scene: Scene,
    optics: dict,
    start_world,
    end_world,
    h_star: float,
    model: ManualOperatorModel,
    seed: int,
    trial_index: int = 0,
    white: sp.Spectrum | None = None,
    dark: sp.Spectrum | None = None,
) -> TrialData:
    """One hand-held pass along the world-frame line.  Returns the same
    TrialData shape the autonomous trials produce, so metrics pool freely."""
    rng = substream(seed, "operator", trial_index)
    rng_spec = substream(seed, "manual_spectrum", trial_index)
    grid = sp.DEFAULT_GRID
    white = white if white is not None else sp.default_white(grid)
    dark = dark if dark is not None else sp.default_dark(grid)

    p0 = np.asarray(start_world, dtype=float)[:2]
    p1 = np.asarray(end_world, dtype=float)[:2]
    length = float(np.linalg.norm(p1 - p0))
    u = (p1 - p0) / length
    n_hat = np.array([-u[1], u[0]])
    nominal_speed = length / model.duration
    dt = 1.0 / model.rate
    n = int(round(model.duration * model.rate))
    surface = scene.surface

    h = h_star + model.mean_offset
    perp = 0.0
    speed_mult = 1.0
    along = 0.0
    spectro_every = max(1, int(round(model.rate / model.spectro_rate)))

    positions = np.empty((n, 3))
    heights = np.empty(n)
    times = np.arange(n) * dt
    spec_rows, spec_t, spec_h, spec_m = [], [], [], []
    for k in range(n):
        h = _ou_step(h, h_star + model.mean_offset, model.sigma_hand,
                     model.tau_height, dt, rng)
        h = max(h, -surface.max_compression)
        perp = _ou_step(perp, 0.0, model.sigma_perp, model.tau_perp, dt, rng)
        speed_mult = _ou_step(speed_mult, 1.0, model.speed_jitter,
                              model.tau_speed, dt, rng)
        along = min(max(along + nominal_speed * max(speed_mult, 0.0) * dt, 0.0), length)
        xy = p0 + along * u + perp * n_hat
        xy[0] = min(max(xy[0], 0.0), surface.x_max)
        xy[1] = min(max(xy[1], 0.0), surface.y_max)
        g = float(surface.height(xy[0], xy[1]))
        positions[k] = (xy[0], xy[1], g + h)
        heights[k] = h
        if k % spectro_every == 0:
            mid = surface.material_at(xy[0], xy[1])
            mat = optics[surface.materials[mid].optics]
            raw = sp.synthesize_raw(mat, h, white, dark, rng_spec)
            spec_rows.append(raw.values)
            spec_t.append(times[k])
            spec_h.append(h)
            spec_m.append(mid)

    raw = np.asarray(spec_rows).reshape(len(spec_rows), grid.n_channels)
    ints, fps = [], []
    for i in range(raw.shape[0]):
        mu_i, mu_f, _ = sp.process_spectrum(
            sp.Spectrum(grid=grid, values=raw[i], role="raw"), white, dark
        )
        ints.append(mu_i)
        fps.append(mu_f)

    summary = {
        "trial_index": trial_index,
        "seed": seed,
        "mode": "manual",
        "duration_s": model.duration,
        "n_spectra": int(raw.shape[0]),
        "height_mean_mm": float(heights.mean()),
        "height_std_mm": float(heights.std(ddof=0)),
    }
    log = {
        "t": times,
        "x": positions[:, 0],
        "y": positions[:, 1],
        "z": positions[:, 2],
        "h_true": heights,
        "stage": np.asarray(["manual"] * n, dtype=object),
    }
    return TrialData(
        summary=summary,
        log=log,
        wavelengths=grid.wavelengths,
        raw=raw,
        white=white.values,
        dark=dark.values,
        intensity=np.asarray(ints),
        fingerprints=np.asarray(fps),
    )


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------


def _scan_mask(trial: TrialData) -> np.ndarray:
    return trial.log["stage"] == "scanning"


def _pool_scanning(trials: list[TrialData], command: ScanCommand):
    """Pooled perp errors (px), lateral speeds (mm/s) and gaps over all
    scanning ticks of all trials."""
    perp, speeds, gaps = [], [], []
    for tr in trials:
        mask = _scan_mask(tr)
        if mask.sum() < 3:
            continue
        tip = np.column_stack([tr.log["true_u_tip"][mask], tr.log["true_v_tip"][mask]])
        perp.append(line_errors_px(tip, command))
        xy = np.column_stack([tr.log["x"][mask], tr.log["y"][mask]])
        dt = float(np.median(np.diff(tr.log["t"][mask])))
        speeds.append(lateral_speeds(xy, 1.0 / dt))
        gaps.append(tr.log["h_true"][mask])
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    return cat(perp), cat(speeds), cat(gaps)


def summarize_batch(trials: list[TrialData], command: ScanCommand, h_star: float) -> dict:
    """Headline numbers for one batch of autonomous trials."""
    n = len(trials)
    done = [tr for tr in trials if tr.summary.get("final_stage") == "done"]
    approach = [tr.summary["approach_time_s"] for tr in trials
                if tr.summary.get("approach_time_s") is not None]
    perp, speeds, gaps = _pool_scanning(trials, command)
    fps = np.concatenate([tr.fingerprints for tr in done if tr.fingerprints.size]) \
        if done else np.zeros((0, 0))
    ints = np.concatenate([tr.intensity for tr in done if tr.intensity.size]) \
        if done else np.zeros(0)

    out = {
        "n_trials": n,
        "n_done": len(done),
        "done_rate": len(done) / n if n else 0.0,
        "fail_reasons": sorted(
            tr.summary.get("fail_reason") for tr in trials
            if tr.summary.get("fail_reason")
        ),
        "terminal_gap_mm": {
            "mean": float(np.mean([tr.summary["terminal_gap_mm"] for tr in trials])),
            "min": float(np.min([tr.summary["terminal_gap_mm"] for tr in trials])),
            "max": float(np.max([tr.summary["terminal_gap_mm"] for tr in trials])),
        },
    }
    if approach:
        out["approach_time_s"] = {
            "median": percentile_nearest_rank(approach, 50),
            "p90": percentile_nearest_rank(approach, 90),
        }
    if perp.size:
        out["line_error_px"] = {
            "mean": float(perp.mean()),
            "p90": percentile_nearest_rank(perp, 90),
        }
        out["scan_speed_mm_s"] = {
            "mean": float(speeds.mean()),
            "std": float(speeds.std(ddof=0)),
        }
        out["height_hold_mae_mm"] = float(np.mean(np.abs(gaps - h_star)))
    if ints.size:
        out["intensity"] = intensity_stats(ints)
    if fps.shape[0] >= 2:
        pooled_mean = fps.mean(axis=0)
        per_trial = [tr.fingerprints.mean(axis=0) for tr in done if tr.fingerprints.size]
        out["fingerprint"] = {
            "sigma_x1e2": fingerprint_sigma(fps) * 1e2,
            "rmse_vs_pooled_x1e3": float(np.mean(
                [fingerprint_rmse(m, pooled_mean) for m in per_trial]
            )) * 1e3,
            "angle_vs_pooled_mrad": float(np.mean(
                [spectral_angle(m, pooled_mean) for m in per_trial]
            )) * 1e3,
        }
    return out


def _trajectory_plot_data(trials: list[TrialData], command: ScanCommand, stride: int = 5):
    paths = []
    for tr in trials:
        mask = tr.log["stage"] != "failed"
        tip = np.column_stack([tr.log["true_u_tip"], tr.log["true_v_tip"]])[mask]
        paths.append(tip[::stride].tolist())
    return {
        "command": {"start": list(command.start), "end": list(command.end)},
        "tip_paths_px": paths,
    }


def _fingerprint_plot_data(trials: list[TrialData]):
    fps = np.concatenate([tr.fingerprints for tr in trials if tr.fingerprints.size]) \
        if trials else np.zeros((0, 0))
    if fps.shape[0] < 2:
        return None
    grid = sp.DEFAULT_GRID
    wl = grid.wavelengths[grid.band_slice(*sp.ANALYSIS_BAND)]
    return {
        "wavelength_nm": wl.tolist(),
        "mean": fps.mean(axis=0).tolist(),
        "std": fps.std(axis=0, ddof=0).tolist(),
    }


def _intensity_hist_data(trials: list[TrialData], bins: int = 24):
    ints = np.concatenate([tr.intensity for tr in trials if tr.intensity.size]) \
        if trials else np.zeros(0)
    if ints.size < 2:
        return None
    counts, edges = np.histogram(ints, bins=bins)
    return {
        "counts": counts.tolist(),
        "edges": edges.tolist(),
        "p25": percentile_nearest_rank(ints, 25),
        "p75": percentile_nearest_rank(ints, 75),
    }


def build_report(
    batches: dict[str, list[TrialData]],
    commands: dict[str, ScanCommand],
    h_stars: dict[str, float],
    manual: list[TrialData] | None = None,
    manual_reference: str | None = None,
) -> dict:
    """Assemble the full report document.

    `plot_data` carries everything the plotting command needs, so rendering
    a report never has to touch the raw trial directories again.
    """
    report: dict = {"format_version": REPORT_FORMAT_VERSION, "batches": {}, "plot_data": {}}
    for name in sorted(batches):
        trials = batches[name]
        cmd = commands[name]
        report["batches"][name] = summarize_batch(trials, cmd, h_stars[name])
        done = [tr for tr in trials if tr.summary.get("final_stage") == "done"]
        pdata = {
            "trajectories": _trajectory_plot_data(trials, cmd),
            "fingerprint": _fingerprint_plot_data(done),
            "intensity_hist": _intensity_hist_data(done),
        }
        report["plot_data"][name] = pdata

    if manual:
        ref_name = manual_reference or sorted(batches)[0]
        auto_done = [
            tr for tr in batches.get(ref_name, [])
            if tr.summary.get("final_stage") == "done"
        ]
        auto_fps = np.concatenate([tr.fingerprints for tr in auto_done
                                   if tr.fingerprints.size])
        man_fps = np.concatenate([tr.fingerprints for tr in manual])
        auto_int = np.concatenate([tr.intensity for tr in auto_done])
        man_int = np.concatenate([tr.intensity for tr in manual])
        report["manual_vs_auto"] = {
            "reference_batch": ref_name,
            "n_manual": len(manual),
            "auto_sigma_x1e2": fingerprint_sigma(auto_fps) * 1e2,
            "manual_sigma_x1e2": fingerprint_sigma(man_fps) * 1e2,
            "auto_intensity_iqr": intensity_stats(auto_int)["iqr"],
            "manual_intensity_iqr": intensity_stats(man_int)["iqr"],
        }
        report["plot_data"]["manual_vs_auto"] = {
            "auto_hist": _intensity_hist_data(auto_done),
            "manual_hist": _intensity_hist_data(manual),
            "auto_fingerprint": _fingerprint_plot_data(auto_done),
            "manual_fingerprint": _fingerprint_plot_data(manual),
        }
    return report


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays so json.dumps stays exact."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_report_json(report: dict, path) -> None:
    Path(path).write_text(
        json.dumps(to_jsonable(report), indent=2, sort_keys=True) + "\n"
    )


def write_report_csv(report: dict, path) -> None:
    """Flat metric rows: batch, metric, value.  Nested keys join with dots."""

    def walk(prefix: str, node, rows: list):
        if isinstance(node, dict):
            for key in sorted(node):
                walk(f"{prefix}.{key}" if prefix else str(key), node[key], rows)
        elif isinstance(node, (int, float)) and not isinstance(node, bool):
            rows.append((prefix, node))

    rows: list = []
    for name in sorted(report.get("batches", {})):
        walk(name, report["batches"][name], rows)
    if "manual_vs_auto" in report:
        walk("manual_vs_auto", report["manual_vs_auto"], rows)
    with open(path, "w", newline="") as fh:
        fh.write("metric,value\n")
        for key, val in rows:
            if isinstance(val, int):
                fh.write(f"{key},{val}\n")
            else:
                fh.write(f"{key},{repr(float(val))}\n")
