"""Spectrometer pipeline: calibration, smoothing, cropping, summaries, and
the synthetic raw-spectrum model."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drscan import presets
from drscan.seeding import substream
from drscan.spectra import (
    ANALYSIS_BAND,
    DEFAULT_GRID,
    CalibrationError,
    MaterialOptics,
    Spectrum,
    WavelengthGrid,
    calibrate,
    compressed_base,
    crop,
    default_dark,
    default_white,
    fingerprint,
    flat_reference,
    gap_coupling,
    intensity,
    process_spectrum,
    smooth,
    synthesize_raw,
)


class TestGrid:
    def test_default_grid_covers_400_to_900(self):
        assert DEFAULT_GRID.wavelengths[0] == 400.0
        assert DEFAULT_GRID.wavelengths[-1] == 900.0
        assert DEFAULT_GRID.n_channels == 501

    def test_band_slice_is_inclusive(self):
        sl = DEFAULT_GRID.band_slice(468.0, 720.0)
        wl = DEFAULT_GRID.wavelengths[sl]
        assert wl[0] == 468.0
        assert wl[-1] == 720.0
        assert len(wl) == 253

    def test_band_outside_grid_raises(self):
        with pytest.raises(ValueError):
            DEFAULT_GRID.band_slice(1000.0, 1100.0)


class TestCalibration:
    def test_white_maps_to_one_exactly(self):
        white, dark = default_white(), default_dark()
        cal = calibrate(white, white, dark)
        assert np.all(cal.values == 1.0)

    def test_dark_maps_to_zero_exactly(self):
        white, dark = default_white(), default_dark()
        cal = calibrate(dark, white, dark)
        assert np.all(cal.values == 0.0)

    def test_linearity(self):
        white, dark = default_white(), default_dark()
        mid = Spectrum(grid=DEFAULT_GRID,
                       values=0.5 * (white.values + dark.values), role="raw")
        cal = calibrate(mid, white, dark)
        assert np.allclose(cal.values, 0.5)

    def test_degenerate_reference_raises(self):
        white = flat_reference(DEFAULT_GRID, 100.0, "white")
        dark_vals = np.full(DEFAULT_GRID.n_channels, 50.0)
        dark_vals[100] = 100.0  # one coinciding channel poisons everything
        dark = Spectrum(grid=DEFAULT_GRID, values=dark_vals, role="dark")
        with pytest.raises(CalibrationError):
            calibrate(white, white, dark)

    def test_grid_mismatch_raises(self):
        small = WavelengthGrid(start=400.0, stop=500.0, step=1.0)
        raw = flat_reference(small, 100.0, "raw")
        with pytest.raises(ValueError):
            calibrate(raw, default_white(), default_dark())


class TestSmoothing:
    def test_reproduces_cubic_exactly(self):
        # window 11, order 3: any degree-<=3 polynomial is a fixed point
        wl = DEFAULT_GRID.wavelengths
        x = (wl - 650.0) / 250.0
        poly = 0.3 + 0.2 * x - 0.4 * x**2 + 0.1 * x**3
        spec = Spectrum(grid=DEFAULT_GRID, values=poly, role="calibrated")
        out = smooth(spec, window=11, order=3)
        assert np.allclose(out.values, poly, atol=1e-9)

    def test_attenuates_high_frequency_noise(self):
        rng = substream(0, "sg")
        wl = DEFAULT_GRID.wavelengths
        clean = 0.5 + 0.2 * np.sin(wl / 80.0)
        noisy = clean + rng.normal(0.0, 0.05, size=wl.size)
        out = smooth(Spectrum(grid=DEFAULT_GRID, values=noisy, role="calibrated"))
        assert np.std(out.values - clean) < 0.5 * np.std(noisy - clean)

    def test_window_validation(self):
        spec = flat_reference(DEFAULT_GRID, 1.0, "calibrated")
        with pytest.raises(ValueError):
            smooth(spec, window=10)
        with pytest.raises(ValueError):
            smooth(spec, window=11, order=11)


class TestSummaries:
    def test_crop_to_analysis_band(self):
        spec = flat_reference(DEFAULT_GRID, 1.0, "calibrated")
        out = crop(spec)
        assert out.grid.n_channels == 253
        assert out.grid.wavelengths[0] == 468.0
        assert out.grid.wavelengths[-1] == 720.0

    def test_intensity_is_channel_mean(self):
        rng = substream(1, "mu")
        vals = rng.uniform(0.1, 0.9, DEFAULT_GRID.n_channels)
        spec = Spectrum(grid=DEFAULT_GRID, values=vals, role="calibrated")
        assert intensity(spec) == pytest.approx(vals.mean(), abs=1e-15)

    def test_fingerprint_is_unit_norm(self):
        rng = substream(2, "fp")
        vals = rng.uniform(0.1, 0.9, DEFAULT_GRID.n_channels)
        fp = fingerprint(Spectrum(grid=DEFAULT_GRID, values=vals, role="calibrated"))
        assert np.linalg.norm(fp) == pytest.approx(1.0)

    @given(scale=st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=50, deadline=None)
    def test_fingerprint_scale_invariant(self, scale):
        rng = substream(3, "fpscale")
        vals = rng.uniform(0.1, 0.9, DEFAULT_GRID.n_channels)
        a = fingerprint(Spectrum(grid=DEFAULT_GRID, values=vals, role="c"))
        b = fingerprint(Spectrum(grid=DEFAULT_GRID, values=scale * vals, role="c"))
        assert np.allclose(a, b, atol=1e-12)

    def test_pipeline_matches_brute_force(self):
        optics = presets.OPTICS["stomach_phantom"]
        white, dark = default_white(), default_dark()
        raw = synthesize_raw(optics, 0.5, white, dark, substream(4, "pipe"))
        mu_i, mu_f, processed = process_spectrum(raw, white, dark)
        by_hand = crop(smooth(calibrate(raw, white, dark)))
        assert mu_i == pytest.approx(np.mean(by_hand.values), abs=1e-15)
        assert np.allclose(mu_f, by_hand.values / np.linalg.norm(by_hand.values),
                           atol=1e-15)
        assert np.array_equal(processed.values, by_hand.values)


class TestSyntheticModel:
    def test_contact_with_no_noise_recovers_base(self):
        optics = presets.OPTICS["liver_phantom"]
        white, dark = default_white(), default_dark()
        raw = synthesize_raw(optics, 0.0, white, dark, rng=None)
        cal = calibrate(raw, white, dark)
        assert np.allclose(cal.values, optics.base, atol=1e-12)

    def test_gap_coupling_shape(self):
        assert gap_coupling(0.0, 3.0) == 1.0
        assert gap_coupling(-2.0, 3.0) == 1.0  # compression never attenuates
        assert gap_coupling(3.0, 3.0) == pytest.approx(np.exp(-1.0))
        hs = np.linspace(0.0, 12.0, 40)
        gs = [gap_coupling(h, 3.0) for h in hs]
        assert np.all(np.diff(gs) <= 0)

    def test_signal_fades_with_gap(self):
        optics = presets.OPTICS["stomach_phantom"]
        white, dark = default_white(), default_dark()
        near = synthesize_raw(optics, 0.5, white, dark, rng=None)
        far = synthesize_raw(optics, 8.0, white, dark, rng=None)
        assert intensity(calibrate(far, white, dark)) < 0.05 * intensity(
            calibrate(near, white, dark)
        )

    def test_compression_tilts_the_spectrum(self):
        optics = presets.OPTICS["stomach_phantom"]
        tilted = compressed_base(optics, -2.0)
        ratio = tilted / optics.base
        # linear ramp: below the band centre darker, above brighter
        assert ratio[0] < 1.0 < ratio[-1]
        assert np.allclose(compressed_base(optics, 1.0), optics.base)

    def test_detector_noise_is_seeded(self):
        optics = presets.OPTICS["rump_steak"]
        white, dark = default_white(), default_dark()
        a = synthesize_raw(optics, 1.0, white, dark, substream(5, "n"))
        b = synthesize_raw(optics, 1.0, white, dark, substream(5, "n"))
        c = synthesize_raw(optics, 1.0, white, dark, substream(6, "n"))
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    def test_base_curves_are_valid_reflectances(self):
        for name, optics in presets.OPTICS.items():
            assert np.all(optics.base > 0) and np.all(optics.base < 1), name
