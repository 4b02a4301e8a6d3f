"""Mel-spectrogram pipeline: STFT, power, triangular mel filterbank, log
compression, and conversion to the standardized 3-channel image the CNNs eat.

Frames are taken without centering so the frame count is exactly
1 + floor((N - win)/hop). The mel scale is HTK: mel(f) = 2595 log10(1 + f/700).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SpectrogramParams:
    win: int = 2048
    hop: int = 512
    window_fn: str = "hann"
    n_mels: int = 128
    fmin_hz: float = 0.0
    fmax_hz: Optional[float] = None
    log_eps: float = 1e-10

    def __post_init__(self):
        if self.win < 2:
            raise ValueError("window length must be at least 2, got %r" % (self.win,))
        if not 0 < self.hop <= self.win:
            raise ValueError("hop must satisfy 0 < hop <= win, got %r" % (self.hop,))
        if self.window_fn not in ("hann", "rectangular"):
            raise ValueError("window_fn must be 'hann' or 'rectangular', got %r" % (self.window_fn,))
        if self.n_mels < 2:
            raise ValueError("n_mels must be at least 2, got %r" % (self.n_mels,))
        if self.fmin_hz < 0:
            raise ValueError("fmin_hz must be non-negative, got %r" % (self.fmin_hz,))
        if self.log_eps <= 0:
            raise ValueError("log_eps must be positive, got %r" % (self.log_eps,))


@dataclass
class PowerSpectrogram:
    values: np.ndarray
    params: SpectrogramParams


@dataclass
class MelFilterbank:
    weights: np.ndarray
    center_freqs_hz: np.ndarray


@dataclass
class MelSpectrogram:
    values: np.ndarray
    log_scaled: bool = False


@dataclass
class ModelInput:
    pixels: np.ndarray


def n_frames(n_samples: int, params: SpectrogramParams) -> int:
    return 1 + (n_samples - params.win) // params.hop


def _window(params: SpectrogramParams) -> np.ndarray:
    if params.window_fn == "rectangular":
        return np.ones(params.win)
    n = np.arange(params.win)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / params.win)


def stft(samples: np.ndarray, params: SpectrogramParams) -> np.ndarray:
    """Windowed rfft per frame; frame t covers samples [t*hop, t*hop + win)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-d signal, got shape %r" % (x.shape,))
    if x.size < params.win:
        raise ValueError("signal of %d samples is shorter than one %d-sample window" % (x.size, params.win))
    frames = sliding_window_view(x, params.win)[:: params.hop]
    return np.fft.rfft(frames * _window(params), axis=1)


def power_spectrogram(stft_out: np.ndarray, params: SpectrogramParams) -> PowerSpectrogram:
    """Elementwise squared magnitude of the STFT."""
    values = stft_out.real**2 + stft_out.imag**2
    return PowerSpectrogram(values=values, params=params)


def hz_to_mel(f_hz) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel) -> np.ndarray:
    return 700.0 * (np.power(10.0, np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(params: SpectrogramParams, sample_rate_hz: int) -> MelFilterbank:
    """Triangular filters with corners equally spaced on the mel scale.

    Filter m rises linearly from corner m to its peak at corner m+1 and falls
    to corner m+2; weights are evaluated at the FFT bin center frequencies.
    """
    nyquist = sample_rate_hz / 2.0
    fmax = nyquist if params.fmax_hz is None else params.fmax_hz
    if fmax > nyquist:
        raise ValueError("fmax %g exceeds Nyquist %g" % (fmax, nyquist))
    if not params.fmin_hz < fmax:
        raise ValueError("fmin %g must be below fmax %g" % (params.fmin_hz, fmax))

    n_bins = params.win // 2 + 1
    bin_freqs = np.arange(n_bins) * (sample_rate_hz / params.win)
    corners = mel_to_hz(np.linspace(hz_to_mel(params.fmin_hz), hz_to_mel(fmax), params.n_mels + 2))

    lower = corners[:-2, None]
    center = corners[1:-1, None]
    upper = corners[2:, None]
    rise = (bin_freqs[None, :] - lower) / (center - lower)
    fall = (upper - bin_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rise, fall))

    if (weights.sum(axis=1) == 0).any():
        raise ValueError(
            "n_mels %d too large for win %d at rate %d: some filter has empty support"
            % (params.n_mels, params.win, sample_rate_hz)
        )
    return MelFilterbank(weights=weights, center_freqs_hz=corners[1:-1].copy())


def mel_spectrogram(spect: PowerSpectrogram, fb: MelFilterbank) -> MelSpectrogram:
    """Matrix product of the power spectrogram with the filterbank rows."""
    if spect.values.shape[1] != fb.weights.shape[1]:
        raise ValueError(
            "bin count mismatch: spectrogram has %d, filterbank expects %d"
            % (spect.values.shape[1], fb.weights.shape[1])
        )
    return MelSpectrogram(values=spect.values @ fb.weights.T, log_scaled=False)


def log_compress(mel: MelSpectrogram, eps: float = 1e-10) -> MelSpectrogram:
    """ln(value + eps), marking the result log-scaled."""
    if mel.log_scaled:
        raise ValueError("mel-spectrogram is already log-scaled")
    if eps <= 0:
        raise ValueError("eps must be positive, got %r" % (eps,))
    return MelSpectrogram(values=np.log(mel.values + eps), log_scaled=True)


def _resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize; identity when sizes already match."""
    h, w = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()
    ys = np.arange(out_h) * ((h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros(out_h, dtype=np.int64)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros(out_w, dtype=np.int64)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bottom = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def to_model_input(mel: MelSpectrogram, out_h: int = 224, out_w: int = 224) -> ModelInput:
    """Resize, standardize to mean 0 / std 1 (std floor 1e-6), replicate 3 channels."""
    if not mel.log_scaled:
        raise ValueError("to_model_input requires a log-scaled mel-spectrogram")
    if mel.values.ndim != 2 or mel.values.shape[0] < 2 or mel.values.shape[1] < 2:
        raise ValueError("degenerate mel-spectrogram shape %r" % (mel.values.shape,))
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    resized = _resize_bilinear(np.asarray(mel.values, dtype=np.float64), out_h, out_w)
    std = resized.std()
    standardized = (resized - resized.mean()) / max(std, 1e-6)
    pixels = np.repeat(standardized[None, :, :], 3, axis=0).astype(np.float32)
    return ModelInput(pixels=pixels)


def export_csv(values: np.ndarray, path) -> None:
    """One row per frame, comma-separated."""
    np.savetxt(path, np.asarray(values), delimiter=",", fmt="%.8g")


def export_png(values: np.ndarray, path) -> None:
    """Grayscale image: frequency rises upward, time runs left to right."""
    from PIL import Image

    v = np.asarray(values, dtype=np.float64).T[::-1]
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(Path(path))
