"""Synthetic diffuse-reflectance spectra and the fixed processing pipeline.

Pipeline order is calibrate -> smooth -> crop -> (intensity, fingerprint) and
is not reorderable; every consumer goes through :func:`process_spectrum`.
Wavelengths are nm, raw spectra are detector counts, calibrated spectra are
dimensionless reflectance.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import savgol_filter

from .validation import as_float_array, check_non_negative, check_positive

# Analysis band retained after cropping, inclusive on both ends.
ANALYSIS_BAND = (468.0, 720.0)
CALIBRATED_RANGE = (-0.1, 1.5)


class CalibrationError(ValueError):
    """White and dark references coincide on some channels."""


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength grid [start, stop] with the given step, inclusive."""

    start: float = 400.0
    stop: float = 900.0
    step: float = 1.0

    def __post_init__(self):
        check_positive(self.step, "step")
        if self.stop <= self.start:
            raise ValueError(f"stop must exceed start, got [{self.start}, {self.stop}]")
        n = round((self.stop - self.start) / self.step)
        if abs(self.start + n * self.step - self.stop) > 1e-9:
            raise ValueError("grid step must tile [start, stop] exactly")

    @property
    def n_channels(self) -> int:
        return round((self.stop - self.start) / self.step) + 1

    @property
    def wavelengths(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.n_channels)

    def band_slice(self, lo: float, hi: float) -> slice:
        """Index slice covering wavelengths in [lo, hi] inclusive."""
        wl = self.wavelengths
        idx = np.nonzero((wl >= lo - 1e-9) & (wl <= hi + 1e-9))[0]
        if idx.size == 0:
            raise ValueError(f"band [{lo}, {hi}] does not intersect the grid")
        return slice(int(idx[0]), int(idx[-1]) + 1)


DEFAULT_GRID = WavelengthGrid()


@dataclass(frozen=True)
class Spectrum:
    """One spectrum on a wavelength grid with a role tag (raw/white/dark/calibrated)."""

    grid: WavelengthGrid
    values: np.ndarray
    role: str = "raw"

    def __post_init__(self):
        vals = as_float_array(self.values, "values", (-1,))
        if vals.shape[0] != self.grid.n_channels:
            raise ValueError(
                f"values length {vals.shape[0]} does not match grid ({self.grid.n_channels} channels)"
            )
        object.__setattr__(self, "values", vals)


def flat_reference(grid: WavelengthGrid, level: float, role: str) -> Spectrum:
    return Spectrum(grid=grid, values=np.full(grid.n_channels, float(level)), role=role)


def default_white(grid: WavelengthGrid = DEFAULT_GRID) -> Spectrum:
    return flat_reference(grid, 1000.0, "white")


def default_dark(grid: WavelengthGrid = DEFAULT_GRID) -> Spectrum:
    return flat_reference(grid, 50.0, "dark")


def _same_grid(*specs: Spectrum) -> WavelengthGrid:
    grid = specs[0].grid
    for s in specs[1:]:
        if s.grid != grid:
            raise ValueError("spectra live on different wavelength grids")
    return grid


def calibrate(raw: Spectrum, white: Spectrum, dark: Spectrum) -> Spectrum:
    """Per-channel (raw - dark) / (white - dark)."""
    grid = _same_grid(raw, white, dark)
    denom = white.values - dark.values
    bad = np.nonzero(np.abs(denom) < 1e-12)[0]
    if bad.size:
        wl = grid.wavelengths[bad]
        head = ", ".join(f"{v:g} nm" for v in wl[:5])
        more = "" if bad.size <= 5 else f" (+{bad.size - 5} more)"
        raise CalibrationError(f"white and dark references coincide at {head}{more}")
    values = (raw.values - dark.values) / denom
    lo, hi = CALIBRATED_RANGE
    if np.any(values < lo) or np.any(values > hi):
        warnings.warn(
            f"calibrated reflectance outside expected range [{lo}, {hi}]",
            RuntimeWarning,
            stacklevel=2,
        )
    return replace(raw, values=values, role="calibrated")


def smooth(spectrum: Spectrum, window: int = 11, order: int = 3) -> Spectrum:
    """Savitzky-Golay smoothing; edges use a polynomial fit on the end window."""
    if window % 2 != 1 or window < 3:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if not 0 <= order < window:
        raise ValueError(f"order must satisfy 0 <= order < window, got {order}")
    if spectrum.grid.n_channels < window:
        raise ValueError("spectrum shorter than the smoothing window")
    values = savgol_filter(spectrum.values, window, order, mode="interp")
    return replace(spectrum, values=values)


def crop(spectrum: Spectrum, band: tuple[float, float] = ANALYSIS_BAND) -> Spectrum:
    """Restrict to the analysis band (inclusive)."""
    lo, hi = band
    sl = spectrum.grid.band_slice(lo, hi)
    wl = spectrum.grid.wavelengths[sl]
    grid = WavelengthGrid(start=float(wl[0]), stop=float(wl[-1]), step=spectrum.grid.step)
    return Spectrum(grid=grid, values=spectrum.values[sl], role=spectrum.role)


def intensity(spectrum: Spectrum) -> float:
    """Mean reflectance over the channels."""
    return float(np.mean(spectrum.values))


def fingerprint(spectrum: Spectrum) -> np.ndarray:
    """Unit-L2 spectral shape vector."""
    norm = float(np.linalg.norm(spectrum.values))
    if norm < 1e-300:
        raise ValueError("cannot fingerprint an all-zero spectrum")
    return spectrum.values / norm


def process_spectrum(
    raw: Spectrum,
    white: Spectrum,
    dark: Spectrum,
    window: int = 11,
    order: int = 3,
    band: tuple[float, float] = ANALYSIS_BAND,
) -> tuple[float, np.ndarray, Spectrum]:
    """The fixed pipeline. Returns (intensity, fingerprint, processed spectrum)."""
    processed = crop(smooth(calibrate(raw, white, dark), window, order), band)
    return intensity(processed), fingerprint(processed), processed


@dataclass(frozen=True)
class MaterialOptics:
    """Parametric optical response of one material.

    ``base`` is the ideal contact reflectance b(lambda) in (0, 1).
    ``gap_scale`` h0 sets how fast signal collapses with probe-surface gap:
    coupling g(h) = exp(-(max(h, 0)/h0)^2).
    ``compression_tilt`` c_d tilts the spectrum linearly across the band by
    c_d * |h| at compression depth h < 0 (pressure blanches the tissue).
    ``noise_sigma`` is additive detector noise in counts.
    """

    name: str
    grid: WavelengthGrid
    base: np.ndarray
    gap_scale: float = 3.0
    compression_tilt: float = 0.08
    noise_sigma: float = 2.0

    def __post_init__(self):
        check_positive(self.gap_scale, "gap_scale")
        check_non_negative(self.compression_tilt, "compression_tilt")
        check_non_negative(self.noise_sigma, "noise_sigma")
        base = as_float_array(self.base, "base", (-1,))
        if base.shape[0] != self.grid.n_channels:
            raise ValueError("base curve length does not match the grid")
        if np.any(base <= 0) or np.any(base >= 1):
            raise ValueError("base reflectance must lie strictly inside (0, 1)")
        object.__setattr__(self, "base", base)


def gap_coupling(h: float, gap_scale: float) -> float:
    """Signal fraction surviving a probe-surface gap of h (>0) mm."""
    gap = max(float(h), 0.0)
    return float(np.exp(-((gap / gap_scale) ** 2)))


def compressed_base(optics: MaterialOptics, h: float) -> np.ndarray:
    """Contact reflectance under compression depth max(-h, 0)."""
    depth = max(-float(h), 0.0)
    if depth == 0.0:
        return optics.base.copy()
    wl = optics.grid.wavelengths
    ramp = (wl - 0.5 * (wl[0] + wl[-1])) / (wl[-1] - wl[0])  # -0.5 .. +0.5 across the band
    return optics.base * (1.0 + optics.compression_tilt * depth * ramp)


def synthesize_raw(
    optics: MaterialOptics,
    h: float,
    white: Spectrum,
    dark: Spectrum,
    rng: np.random.Generator | None = None,
) -> Spectrum:
    """Raw counts seen by the detector at contact height h.

    raw = dark + g(h) * b_compressed(lambda) * (white - dark) + noise.
    """
    grid = _same_grid(white, dark)
    if grid != optics.grid:
        raise ValueError("references and optics live on different grids")
    signal = gap_coupling(h, optics.gap_scale) * compressed_base(optics, h)
    values = dark.values + signal * (white.values - dark.values)
    if rng is not None and optics.noise_sigma > 0:
        values = values + rng.normal(0.0, optics.noise_sigma, size=values.shape)
    return Spectrum(grid=grid, values=values, role="raw")
