import numpy as np
import pytest

from cssstn.preprocess import (CROP_FREQ_BINS, CROP_TIME_BINS, FilterSpec,
                               MorletParams, OUTPUT_SIZE, PreprocessConfig,
                               RawRecording, _bilinear_resize, _scaled_wavelet,
                               bandpass_filter, crop_resize, epoch_and_baseline,
                               morlet_cwt, preprocess_pipeline, resample)
from cssstn.store import EpochSet


def tone_epochs(freq_hz, fs=250.0, seconds=2.0, channels=1):
    t = np.arange(int(fs * seconds)) / fs
    wave = np.sin(2 * np.pi * freq_hz * t)
    data = np.tile(wave, (1, channels, 1))
    return EpochSet(data=data, labels=np.array([0]), subject_id="S01",
                    sampling_rate=fs)


def rms(x):
    return float(np.sqrt(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def steady_rms(epochs):
    """RMS of the central half, excluding the forward-backward edge transients."""
    out = epochs.data[0, 0]
    n = len(out)
    return rms(out[n // 4: -n // 4])


class TestBandpassFilter:
    def test_stopband_tone_removed(self):
        epochs = tone_epochs(50.0, seconds=4.0)
        out = bandpass_filter(epochs)
        assert steady_rms(out) <= 0.01 * rms(epochs.data)

    def test_passband_tone_preserved(self):
        epochs = tone_epochs(10.0)
        out = bandpass_filter(epochs)
        assert rms(out.data) >= 0.90 * rms(epochs.data)

    def test_passband_within_one_db(self):
        for freq in (8.0, 15.0, 25.0):
            epochs = tone_epochs(freq)
            ratio = rms(bandpass_filter(epochs).data) / rms(epochs.data)
            assert abs(20 * np.log10(ratio)) <= 1.0, f"{freq} Hz gain off"

    def test_forty_db_attenuation_out_of_band(self):
        # >= 2x the upper edge; zero-phase filtering doubles the design attenuation
        for freq in (60.0, 80.0, 100.0):
            epochs = tone_epochs(freq, seconds=4.0)
            ratio = steady_rms(bandpass_filter(epochs)) / rms(epochs.data)
            assert 20 * np.log10(max(ratio, 1e-12)) <= -40.0, f"{freq} Hz leaks"

    def test_zero_input_zero_output(self):
        epochs = EpochSet(data=np.zeros((2, 3, 500)), labels=np.array([0, 1]),
                          subject_id="S01", sampling_rate=250.0)
        assert np.allclose(bandpass_filter(epochs).data, 0.0)

    def test_shape_unchanged(self):
        epochs = tone_epochs(10.0, channels=3)
        assert bandpass_filter(epochs).data.shape == epochs.data.shape

    def test_epoch_shorter_than_filter_rejected(self):
        epochs = EpochSet(data=np.zeros((1, 1, 50)), labels=np.array([0]),
                          subject_id="S01", sampling_rate=250.0)
        with pytest.raises(ValueError):
            bandpass_filter(epochs)

    def test_invalid_band_rejected(self):
        with pytest.raises(ValueError):
            FilterSpec(low_hz=2.0, high_hz=30.0).validate(sampling_rate=50.0)
        with pytest.raises(ValueError):
            FilterSpec(low_hz=30.0, high_hz=2.0).validate(sampling_rate=250.0)


class TestResample:
    def test_thousand_to_two_fifty(self):
        epochs = EpochSet(data=np.random.default_rng(0).standard_normal((2, 4, 1000)),
                          labels=np.array([0, 1]), subject_id="S01",
                          sampling_rate=1000.0)
        out = resample(epochs, 250.0)
        assert out.n_samples == 250
        assert out.sampling_rate == 250.0

    def test_same_rate_identity(self):
        epochs = tone_epochs(10.0)
        out = resample(epochs, 250.0)
        assert np.array_equal(out.data, epochs.data)

    def test_dc_constant_preserved(self):
        epochs = EpochSet(data=np.full((1, 2, 1000), 3.5), labels=np.array([0]),
                          subject_id="S01", sampling_rate=1000.0)
        out = resample(epochs, 250.0)
        assert out.n_samples == 250
        assert np.allclose(out.data, 3.5, atol=1e-5)

    def test_invalid_target_rejected(self):
        epochs = tone_epochs(10.0)
        with pytest.raises(ValueError):
            resample(epochs, 0.0)
        with pytest.raises(ValueError):
            resample(epochs, 500.0)


class TestEpochAndBaseline:
    def test_one_second_epochs(self):
        raw = RawRecording(data=np.random.default_rng(0).standard_normal((3, 1000)),
                           sampling_rate=250.0, onsets=np.array([0, 250, 500]),
                           labels=np.array([0, 1, 0]), subject_id="S01")
        epochs, skipped = epoch_and_baseline(raw)
        assert epochs.data.shape == (3, 3, 250)
        assert skipped == 0

    def test_constant_channel_zeroed(self):
        raw = RawRecording(data=np.full((1, 500), 7.0), sampling_rate=250.0,
                           onsets=np.array([0]), labels=np.array([1]))
        epochs, _ = epoch_and_baseline(raw)
        assert np.allclose(epochs.data, 0.0)

    def test_adjacent_onsets_non_overlapping(self):
        data = np.arange(500, dtype=float)[None, :]
        raw = RawRecording(data=data, sampling_rate=250.0,
                           onsets=np.array([0, 250]), labels=np.array([0, 1]))
        epochs, _ = epoch_and_baseline(raw)
        a = epochs.data[0, 0] + data[0, :250].mean()
        b = epochs.data[1, 0] + data[0, 250:].mean()
        assert np.allclose(a, data[0, :250], atol=1e-4)
        assert np.allclose(b, data[0, 250:], atol=1e-4)

    def test_late_onset_skipped(self):
        raw = RawRecording(data=np.zeros((1, 300)), sampling_rate=250.0,
                           onsets=np.array([0, 100]), labels=np.array([0, 1]))
        epochs, skipped = epoch_and_baseline(raw)
        assert epochs.n_epochs == 1
        assert skipped == 1


class TestMorletCwt:
    def test_wavelet_input_peaks_at_its_own_row(self):
        fs = 250.0
        params = MorletParams()
        freqs = np.asarray(params.frequencies)
        f0_index = 13
        psi = _scaled_wavelet(freqs[f0_index], params.beta, fs, max_len=250)
        epoch = np.zeros((1, 250))
        center = 125
        start = center - len(psi) // 2
        epoch[0, start:start + len(psi)] = psi
        scalo = morlet_cwt(epoch, params, fs)
        row = scalo[0, f0_index]
        assert row.argmax() == center
        assert np.all(scalo[0, :, center] <= row[center] + 1e-12)
        assert scalo[0, :, center].argmax() == f0_index

    def test_zero_input_zero_output(self):
        scalo = morlet_cwt(np.zeros((2, 250)), MorletParams(), 250.0)
        assert np.allclose(scalo, 0.0)
        assert scalo.shape == (2, CROP_FREQ_BINS, 250)

    def test_homogeneity(self):
        rng = np.random.default_rng(0)
        epoch = rng.standard_normal((2, 250))
        params = MorletParams()
        a = morlet_cwt(epoch, params, 250.0)
        b = morlet_cwt(2.0 * epoch, params, 250.0)
        assert np.allclose(b, 2.0 * a, atol=1e-9)

    def test_nonnegative_finite(self):
        epoch = np.random.default_rng(1).standard_normal((1, 250))
        scalo = morlet_cwt(epoch, MorletParams(), 250.0)
        assert (scalo >= 0).all() and np.isfinite(scalo).all()

    def test_above_nyquist_rejected(self):
        params = MorletParams(frequencies=(10.0, 200.0))
        with pytest.raises(ValueError):
            morlet_cwt(np.zeros((1, 250)), params, 250.0)

    def test_too_short_epoch_rejected(self):
        with pytest.raises(ValueError):
            morlet_cwt(np.zeros((1, 2)), MorletParams(), 250.0)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            MorletParams(beta=0.0)
        with pytest.raises(ValueError):
            MorletParams(frequencies=(10.0, 5.0))


class TestCropResize:
    def test_constant_preserved(self):
        scalo = np.full((2, 28, 100), 4.2)
        out = crop_resize(scalo)
        assert out.shape == (2, OUTPUT_SIZE, OUTPUT_SIZE)
        assert np.allclose(out, 4.2, atol=1e-9)

    def test_linear_ramp_matches_closed_form(self):
        rows = np.arange(CROP_FREQ_BINS, dtype=np.float64)
        cols = np.arange(CROP_TIME_BINS, dtype=np.float64)
        ramp = 2.0 * rows[:, None] + 0.5 * cols[None, :]
        out = crop_resize(ramp[None])
        ys = np.linspace(0.0, CROP_FREQ_BINS - 1.0, OUTPUT_SIZE)
        xs = np.linspace(0.0, CROP_TIME_BINS - 1.0, OUTPUT_SIZE)
        expected = 2.0 * ys[:, None] + 0.5 * xs[None, :]
        assert np.allclose(out[0], expected, atol=1e-6)

    def test_output_bounds_within_input_range(self):
        rng = np.random.default_rng(0)
        scalo = rng.uniform(1.0, 9.0, size=(1, 30, 120))
        out = crop_resize(scalo)
        assert out.min() >= scalo.min() - 1e-9
        assert out.max() <= scalo.max() + 1e-9

    def test_insufficient_rows_rejected(self):
        with pytest.raises(ValueError):
            crop_resize(np.zeros((1, 20, 100)))
        with pytest.raises(ValueError):
            crop_resize(np.zeros((1, 28, 80)))

    def test_truncate_mode_uses_leading_columns(self):
        scalo = np.zeros((1, 28, 200))
        scalo[0, :, :100] = 1.0
        out = crop_resize(scalo, time_crop="truncate")
        assert np.allclose(out, 1.0)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            crop_resize(np.zeros((1, 28, 100)), time_crop="fold")

    def test_bilinear_identity_when_sizes_match(self):
        rng = np.random.default_rng(1)
        img = rng.standard_normal((5, 7))
        assert np.allclose(_bilinear_resize(img, 5, 7), img, atol=1e-12)


class TestPipeline:
    def _epochs(self, n=4, channels=3, fs=250.0, seconds=1.0, seed=0):
        rng = np.random.default_rng(seed)
        labels = np.array([0, 1] * (n // 2))
        return EpochSet(data=rng.standard_normal((n, channels, int(fs * seconds))),
                        labels=labels, subject_id="S01", sampling_rate=fs)

    def test_output_shape(self):
        feats = preprocess_pipeline(self._epochs())
        assert feats.values.shape == (4, 3, OUTPUT_SIZE, OUTPUT_SIZE)
        assert np.array_equal(feats.labels, np.array([0, 1, 0, 1]))

    def test_empty_input_empty_output(self):
        empty = EpochSet(data=np.zeros((0, 3, 250)), labels=np.zeros(0, dtype=int),
                         subject_id="S01", sampling_rate=250.0)
        feats = preprocess_pipeline(empty)
        assert feats.values.shape == (0, 3, OUTPUT_SIZE, OUTPUT_SIZE)

    def test_deterministic(self):
        a = preprocess_pipeline(self._epochs(seed=3))
        b = preprocess_pipeline(self._epochs(seed=3))
        assert np.array_equal(a.values, b.values)

    def test_raw_recording_accepted(self):
        rng = np.random.default_rng(0)
        raw = RawRecording(data=rng.standard_normal((2, 1000)), sampling_rate=250.0,
                           onsets=np.array([0, 250, 500]),
                           labels=np.array([0, 1, 0]), subject_id="S01")
        feats = preprocess_pipeline(raw)
        assert feats.values.shape == (3, 2, OUTPUT_SIZE, OUTPUT_SIZE)

    def test_unsupported_input_rejected(self):
        with pytest.raises(TypeError):
            preprocess_pipeline(np.zeros((3, 250)))

    def test_downsampling_path(self):
        epochs = self._epochs(fs=1000.0)
        feats = preprocess_pipeline(epochs, PreprocessConfig(target_hz=250.0))
        assert feats.values.shape == (4, 3, OUTPUT_SIZE, OUTPUT_SIZE)
        assert np.isfinite(feats.values).all()
