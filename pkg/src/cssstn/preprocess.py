"""Raw epochs -> C x 64 x 64 time-frequency features.

Stages: zero-phase FIR band-pass, resampling to 250 Hz, 1 s epoching with
baseline correction, Morlet CWT magnitude, crop to 28 x 100 and bilinear
upsample to 64 x 64 per channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .store import EpochSet, FeatureSet

OUTPUT_SIZE = 64
CROP_FREQ_BINS = 28
CROP_TIME_BINS = 100


@dataclass(frozen=True)
class FilterSpec:
    """Zero-phase FIR band-pass (Hamming-window design)."""

    low_hz: float = 2.0
    high_hz: float = 30.0
    # wide enough that the FIR fits inside a 1 s epoch at 250-1000 Hz
    transition_hz: float = 5.0

    def validate(self, sampling_rate: float) -> None:
        if not (0 < self.low_hz < self.high_hz < sampling_rate / 2):
            raise ValueError(
                f"band ({self.low_hz}, {self.high_hz}) invalid for fs={sampling_rate}"
            )

    def taps(self, sampling_rate: float) -> np.ndarray:
        self.validate(sampling_rate)
        # 3.3 / transition-width rule of thumb for a Hamming window
        n = int(np.ceil(3.3 * sampling_rate / self.transition_hz))
        n += 1 - n % 2  # odd length keeps the group delay integral
        return signal.firwin(
            n, [self.low_hz, self.high_hz], pass_zero=False, fs=sampling_rate,
            window="hamming",
        )


@dataclass(frozen=True)
class MorletParams:
    """Envelope width and analysis frequency grid of the wavelet transform."""

    beta: float = 1.0
    frequencies: tuple = tuple(np.linspace(2.0, 29.0, CROP_FREQ_BINS))

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        freqs = np.asarray(self.frequencies, dtype=float)
        if len(freqs) == 0 or np.any(np.diff(freqs) <= 0):
            raise ValueError("frequencies must be strictly ascending")


@dataclass(frozen=True)
class PreprocessConfig:
    filter_spec: FilterSpec = FilterSpec()
    target_hz: float = 250.0
    morlet: MorletParams = MorletParams()
    epoch_seconds: float = 1.0
    time_crop: str = "decimate"  # or "truncate"


@dataclass
class RawRecording:
    """Continuous multichannel recording with stimulus onsets."""

    data: np.ndarray  # (C, T)
    sampling_rate: float
    onsets: np.ndarray  # sample indices
    labels: np.ndarray  # one label per onset
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.onsets = np.asarray(self.onsets, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 2:
            raise ValueError("raw data must be (C, T)")
        if len(self.onsets) != len(self.labels):
            raise ValueError("one label per onset required")


# ---------------------------------------------------------------------------
# Stage operations
# ---------------------------------------------------------------------------

def bandpass_filter(epochs: EpochSet, spec: FilterSpec = FilterSpec()) -> EpochSet:
    """Apply the band-pass forward-backward (zero phase); shape unchanged."""
    taps = spec.taps(epochs.sampling_rate)
    padlen = 3 * len(taps)
    if epochs.n_samples <= padlen:
        # filtfilt padding needs more signal than the default for long FIRs
        padlen = epochs.n_samples - 1
    if epochs.n_samples <= len(taps):
        raise ValueError(
            f"epoch length {epochs.n_samples} shorter than filter length {len(taps)}"
        )
    filtered = signal.filtfilt(taps, [1.0], epochs.data.astype(np.float64),
                               axis=-1, padlen=padlen)
    return replace(epochs, data=filtered.astype(np.float32))


def resample(epochs: EpochSet, target_hz: float) -> EpochSet:
    """Band-limited resampling to T' = round(T * target_hz / fs)."""
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    if target_hz > epochs.sampling_rate:
        raise ValueError("upsampling above the original rate is not supported")
    if target_hz == epochs.sampling_rate:
        return replace(epochs)
    new_len = int(round(epochs.n_samples * target_hz / epochs.sampling_rate))
    data = signal.resample(epochs.data.astype(np.float64), new_len, axis=-1)
    return replace(epochs, data=data.astype(np.float32), sampling_rate=target_hz)


def epoch_and_baseline(raw: RawRecording, epoch_seconds: float = 1.0) -> tuple[EpochSet, int]:
    """Cut fixed-length epochs at each onset and subtract the per-channel mean.

    Onsets too close to the end of the recording are skipped; the number of
    skipped onsets is returned alongside the EpochSet.
    """
    length = int(round(raw.sampling_rate * epoch_seconds))
    segments, labels = [], []
    skipped = 0
    for onset, label in zip(raw.onsets, raw.labels):
        if onset < 0 or onset + length > raw.data.shape[1]:
            skipped += 1
            continue
        seg = raw.data[:, onset:onset + length]
        seg = seg - seg.mean(axis=1, keepdims=True)
        segments.append(seg)
        labels.append(label)
    data = np.stack(segments) if segments else np.zeros((0, raw.data.shape[0], length))
    epochs = EpochSet(
        data=data,
        labels=np.asarray(labels, dtype=np.int64),
        subject_id=raw.subject_id,
        sampling_rate=raw.sampling_rate,
    )
    return epochs, skipped


def _scaled_wavelet(freq: float, beta: float, sampling_rate: float,
                    max_len: int | None = None) -> np.ndarray:
    """Discretized unit-energy wavelet at analysis frequency ``freq``.

    The mother wavelet exp(-beta^2 t^2 / 2) cos(pi t) is compressed by the
    analysis frequency, sampled where the envelope exceeds 1e-4 and
    L2-normalized so magnitudes are comparable across scales. The support is
    truncated to ``max_len`` samples so short epochs stay analyzable at the
    lowest frequencies.
    """
    # envelope exp(-(beta f t)^2 / 2) >= 1e-4  <=>  |t| <= sqrt(2 ln 1e4)/(beta f)
    half_support = np.sqrt(2.0 * np.log(1e4)) / (beta * freq)
    n_half = max(1, int(np.floor(half_support * sampling_rate)))
    if max_len is not None:
        n_half = min(n_half, (max_len - 1) // 2)
    t = np.arange(-n_half, n_half + 1) / sampling_rate
    psi = np.exp(-0.5 * (beta * freq * t) ** 2) * np.cos(np.pi * freq * t)
    return psi / np.linalg.norm(psi)


def _cwt_batch(data: np.ndarray, params: MorletParams,
               sampling_rate: float) -> np.ndarray:
    """Magnitude scalograms for a batch of epochs: (N, C, T) -> (N, C, F, T)."""
    freqs = np.asarray(params.frequencies, dtype=float)
    if freqs[-1] > sampling_rate / 2:
        raise ValueError(
            f"analysis frequency {freqs[-1]} above Nyquist {sampling_rate / 2}"
        )
    n, n_ch, n_t = data.shape
    if n_t < 3:
        raise ValueError(f"epoch of {n_t} samples too short for wavelet analysis")
    out = np.empty((n, n_ch, len(freqs), n_t))
    for fi, freq in enumerate(freqs):
        psi = _scaled_wavelet(freq, params.beta, sampling_rate, max_len=n_t)
        conv = signal.fftconvolve(data, psi[None, None, :], mode="same", axes=-1)
        out[:, :, fi, :] = np.abs(conv)
    return out


def morlet_cwt(epoch: np.ndarray, params: MorletParams,
               sampling_rate: float) -> np.ndarray:
    """CWT magnitude scalogram, shape (C, F, T).

    values[c, f, t] = |epoch[c] * wavelet_f|(t) (same-length convolution).
    """
    epoch = np.asarray(epoch, dtype=np.float64)
    if epoch.ndim != 2:
        raise ValueError("epoch must be (C, T)")
    return _cwt_batch(epoch[None], params, sampling_rate)[0]


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation with corner-aligned sampling."""
    in_h, in_w = img.shape
    ys = np.linspace(0.0, in_h - 1.0, out_h)
    xs = np.linspace(0.0, in_w - 1.0, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 2) if in_h > 1 else np.zeros(out_h, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 2) if in_w > 1 else np.zeros(out_w, int)
    wy = (ys - y0) if in_h > 1 else np.zeros(out_h)
    wx = (xs - x0) if in_w > 1 else np.zeros(out_w)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def crop_resize(scalogram: np.ndarray, time_crop: str = "decimate") -> np.ndarray:
    """Reduce (C, F, T) to the 28 x 100 window, then upsample to 64 x 64."""
    n_ch, n_f, n_t = scalogram.shape
    if n_f < CROP_FREQ_BINS or n_t < CROP_TIME_BINS:
        raise ValueError(
            f"scalogram {n_f}x{n_t} smaller than crop {CROP_FREQ_BINS}x{CROP_TIME_BINS}"
        )
    freq_rows = np.linspace(0, n_f - 1, CROP_FREQ_BINS).round().astype(int)
    if time_crop == "decimate":
        time_cols = np.linspace(0, n_t - 1, CROP_TIME_BINS).round().astype(int)
    elif time_crop == "truncate":
        time_cols = np.arange(CROP_TIME_BINS)
    else:
        raise ValueError(f"unknown time_crop mode: {time_crop!r}")
    cropped = scalogram[:, freq_rows][:, :, time_cols]
    out = np.empty((n_ch, OUTPUT_SIZE, OUTPUT_SIZE))
    for ci in range(n_ch):
        out[ci] = _bilinear_resize(cropped[ci], OUTPUT_SIZE, OUTPUT_SIZE)
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def preprocess_pipeline(raw_or_epochs, config: PreprocessConfig = PreprocessConfig()) -> FeatureSet:
    """filter -> resample -> epoch/baseline -> CWT -> crop/resize.

    Accepts either a RawRecording (epoched here) or an already-epoched
    EpochSet (baseline subtraction applied, epoching skipped).
    """
    if isinstance(raw_or_epochs, RawRecording):
        epochs, _ = epoch_and_baseline(raw_or_epochs, config.epoch_seconds)
    elif isinstance(raw_or_epochs, EpochSet):
        epochs = raw_or_epochs
        data = epochs.data - epochs.data.mean(axis=2, keepdims=True)
        epochs = replace(epochs, data=data)
    else:
        raise TypeError(f"unsupported input type: {type(raw_or_epochs)!r}")

    if epochs.n_epochs == 0:
        return FeatureSet(
            values=np.zeros((0, epochs.n_channels, OUTPUT_SIZE, OUTPUT_SIZE)),
            labels=np.zeros(0, dtype=np.int64),
            subject_id=epochs.subject_id,
        )

    epochs = bandpass_filter(epochs, config.filter_spec)
    epochs = resample(epochs, config.target_hz)

    scalos = _cwt_batch(epochs.data.astype(np.float64), config.morlet,
                        epochs.sampling_rate)
    feats = np.empty((epochs.n_epochs, epochs.n_channels, OUTPUT_SIZE, OUTPUT_SIZE),
                     dtype=np.float32)
    for i in range(epochs.n_epochs):
        feats[i] = crop_resize(scalos[i], config.time_crop)
    return FeatureSet(
        values=feats,
        labels=epochs.labels.copy(),
        subject_id=epochs.subject_id,
        acquisition_order=epochs.acquisition_order.copy(),
    )
