"""SVG figures rendered from a report's `plot_data` section.

Rendering is deterministic: Agg backend, pinned svg.hashsalt, and no Date
metadata, so regenerating a figure from the same report is byte-identical.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

matplotlib.rcParams["svg.hashsalt"] = "drscan"
matplotlib.rcParams["figure.max_open_warning"] = 0

_SAVE_KW = dict(format="svg", metadata={"Date": None})


def _new_axes(width=6.4, height=4.2):
    fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def plot_trajectories(traj_data: dict, path) -> None:
    """True tip-pixel paths of every trial over the commanded scan line."""
    fig, ax = _new_axes()
    for tip in traj_data["tip_paths_px"]:
        if not tip:
            continue
        arr = list(zip(*tip))
        ax.plot(arr[0], arr[1], lw=0.7, alpha=0.6, color="tab:blue")
    cmd = traj_data["command"]
    ax.plot(
        [cmd["start"][0], cmd["end"][0]],
        [cmd["start"][1], cmd["end"][1]],
        color="tab:red",
        lw=2.0,
        label="commanded line",
    )
    ax.set_xlabel("u (px)")
    ax.set_ylabel("v (px)")
    ax.invert_yaxis()  # image convention, v grows downward
    ax.legend(loc="best")
    ax.set_title("tip trajectories")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_fingerprint(fp_data: dict, path, label: str = "mean fingerprint",
                     second: dict | None = None, second_label: str = "") -> None:
    """Mean unit-norm spectrum with a +-1 std band; optional second band."""
    fig, ax = _new_axes()

    def band(data, color, lab):
        wl = data["wavelength_nm"]
        mean = data["mean"]
        std = data["std"]
        lo = [m - s for m, s in zip(mean, std)]
        hi = [m + s for m, s in zip(mean, std)]
        ax.fill_between(wl, lo, hi, alpha=0.25, color=color)
        ax.plot(wl, mean, color=color, lw=1.2, label=lab)

    band(fp_data, "tab:blue", label)
    if second is not None:
        band(second, "tab:orange", second_label)
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("normalized reflectance")
    ax.legend(loc="best")
    ax.set_title("spectral fingerprint")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_intensity_hist(hist_data: dict, path, label: str = "auto",
                        second: dict | None = None, second_label: str = "manual") -> None:
    """Intensity histogram with the quartile markers used for the IQR."""
    fig, ax = _new_axes()

    def bars(data, color, lab):
        edges = data["edges"]
        counts = data["counts"]
        widths = [b - a for a, b in zip(edges[:-1], edges[1:])]
        ax.bar(edges[:-1], counts, width=widths, align="edge", alpha=0.5,
               color=color, label=lab)
        for q in ("p25", "p75"):
            ax.axvline(data[q], color=color, ls="--", lw=1.0)

    bars(hist_data, "tab:blue", label)
    if second is not None:
        bars(second, "tab:orange", second_label)
    ax.set_xlabel("mean calibrated intensity")
    ax.set_ylabel("spectra")
    ax.legend(loc="best")
    ax.set_title("intensity spread (dashed: quartiles)")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_report_plots(report: dict, out_dir) -> list[Path]:
    """Write every figure the report's plot_data supports; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name, fn, *args, **kw):
        p = out_dir / name
        fn(*args, path=p, **kw)
        written.append(p)

    for batch, pdata in sorted(report.get("plot_data", {}).items()):
        if batch == "manual_vs_auto":
            continue
        if pdata.get("trajectories"):
            emit(f"{batch}_trajectories.svg", plot_trajectories, pdata["trajectories"])
        if pdata.get("fingerprint"):
            emit(f"{batch}_fingerprint.svg", plot_fingerprint, pdata["fingerprint"],
                 label=batch)
        if pdata.get("intensity_hist"):
            emit(f"{batch}_intensity.svg", plot_intensity_hist, pdata["intensity_hist"],
                 label=batch)

    mva = report.get("plot_data", {}).get("manual_vs_auto")
    if mva:
        if mva.get("auto_hist") and mva.get("manual_hist"):
            emit("manual_vs_auto_intensity.svg", plot_intensity_hist,
                 mva["auto_hist"], second=mva["manual_hist"])
        if mva.get("auto_fingerprint") and mva.get("manual_fingerprint"):
            emit("manual_vs_auto_fingerprint.svg", plot_fingerprint,
                 mva["auto_fingerprint"], label="auto",
                 second=mva["manual_fingerprint"], second_label="manual")
    return written
