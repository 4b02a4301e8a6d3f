import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melmood.dsp import (
    SpectrogramParams,
    build_mel_filterbank,
    export_csv,
    export_png,
    hz_to_mel,
    log_compress,
    mel_spectrogram,
    mel_to_hz,
    n_frames,
    power_spectrogram,
    stft,
    to_model_input,
)

PARAMS = SpectrogramParams()


def test_frame_count_formula():
    # 1 + floor((N - win) / hop), no centering
    assert n_frames(220500, PARAMS) == 427
    assert n_frames(2048, PARAMS) == 1
    assert n_frames(2048 + 511, PARAMS) == 1
    assert n_frames(2048 + 512, PARAMS) == 2


def test_stft_rejects_short_input():
    with pytest.raises(ValueError):
        stft(np.zeros(2047), PARAMS)


def test_stft_zero_signal_is_zero():
    out = stft(np.zeros(220500), PARAMS)
    assert out.shape == (427, 1025)
    assert np.all(out == 0)


def test_stft_bin_centered_sine_concentrates():
    # Periodic Hann leaks only into adjacent bins for an exact-bin sinusoid.
    rate = 44100
    k = 32
    freq = k * rate / PARAMS.win
    t = np.arange(5 * rate) / rate
    power = power_spectrogram(stft(np.sin(2 * np.pi * freq * t), PARAMS), PARAMS)
    total = power.values.sum(axis=1)
    near = power.values[:, k - 1 : k + 2].sum(axis=1)
    assert np.all(near >= 0.999 * total)


def test_power_is_squared_magnitude():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, 4096)
    out = stft(x, PARAMS)
    power = power_spectrogram(out, PARAMS)
    npt.assert_allclose(power.values, np.abs(out) ** 2, rtol=1e-12)


def test_mel_curve_known_points():
    assert hz_to_mel(0.0) == 0.0
    npt.assert_allclose(hz_to_mel(700.0), 2595.0 * np.log10(2.0))
    npt.assert_allclose(mel_to_hz(hz_to_mel(1234.5)), 1234.5, rtol=1e-12)


def test_filterbank_shape_and_centers():
    fb = build_mel_filterbank(PARAMS, 44100)
    assert fb.weights.shape == (128, 1025)
    assert np.all(fb.weights >= 0)
    assert np.all(np.diff(fb.center_freqs_hz) > 0)
    # every triangle has support and a unit peak somewhere near 1
    assert np.all(fb.weights.sum(axis=1) > 0)
    assert fb.weights.max() <= 1.0 + 1e-12


def test_filterbank_rejects_bad_ranges():
    with pytest.raises(ValueError):
        build_mel_filterbank(SpectrogramParams(fmax_hz=30000.0), 44100)
    with pytest.raises(ValueError):
        build_mel_filterbank(SpectrogramParams(fmin_hz=5000.0, fmax_hz=4000.0), 44100)
    # so many bands that low-frequency triangles own no bin
    with pytest.raises(ValueError, match="empty"):
        build_mel_filterbank(SpectrogramParams(n_mels=512), 44100)


def test_mel_product_matches_naive_matmul():
    rng = np.random.default_rng(5)
    fb = build_mel_filterbank(PARAMS, 44100)
    power = power_spectrogram(stft(rng.uniform(-1, 1, 44100), PARAMS), PARAMS)
    mel = mel_spectrogram(power, fb)
    naive = np.empty((power.values.shape[0], 128))
    for i in range(power.values.shape[0]):
        for j in range(128):
            naive[i, j] = float(np.dot(power.values[i], fb.weights[j]))
    npt.assert_allclose(mel.values, naive, rtol=1e-6)


def test_log_compress_values_and_double_compression_guard():
    fb = build_mel_filterbank(PARAMS, 44100)
    power = power_spectrogram(stft(np.zeros(4096), PARAMS), PARAMS)
    mel = mel_spectrogram(power, fb)
    logged = log_compress(mel)
    npt.assert_allclose(logged.values, np.log(1e-10))
    with pytest.raises(ValueError):
        log_compress(logged)


def test_model_input_shape_and_standardization():
    rng = np.random.default_rng(7)
    fb = build_mel_filterbank(PARAMS, 44100)
    mel = log_compress(mel_spectrogram(power_spectrogram(stft(rng.uniform(-1, 1, 5 * 44100), PARAMS), PARAMS), fb))
    mi = to_model_input(mel, out_h=64, out_w=64)
    assert mi.pixels.shape == (3, 64, 64)
    assert mi.pixels.dtype == np.float32
    npt.assert_allclose(mi.pixels.mean(), 0.0, atol=1e-5)
    npt.assert_allclose(mi.pixels.std(), 1.0, atol=1e-4)
    npt.assert_array_equal(mi.pixels[0], mi.pixels[1])
    npt.assert_array_equal(mi.pixels[0], mi.pixels[2])


def test_model_input_requires_log_scaling():
    fb = build_mel_filterbank(PARAMS, 44100)
    mel = mel_spectrogram(power_spectrogram(stft(np.zeros(4096), PARAMS), PARAMS), fb)
    with pytest.raises(ValueError):
        to_model_input(mel, 64, 64)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pipeline_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, 8192)
    fb = build_mel_filterbank(PARAMS, 44100)

    def run():
        mel = log_compress(mel_spectrogram(power_spectrogram(stft(x, PARAMS), PARAMS), fb))
        return to_model_input(mel, 32, 32).pixels

    assert np.array_equal(run(), run())


def test_exports_write_files(tmp_path):
    values = np.random.default_rng(9).uniform(-5, 5, (40, 16))
    csv = tmp_path / "mel.csv"
    png = tmp_path / "mel.png"
    export_csv(values, csv)
    export_png(values, png)
    loaded = np.loadtxt(csv, delimiter=",")
    npt.assert_allclose(loaded, values, rtol=1e-6)
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_params_validation():
    with pytest.raises(ValueError):
        SpectrogramParams(win=0)
    with pytest.raises(ValueError):
        SpectrogramParams(hop=0)
    with pytest.raises(ValueError):
        SpectrogramParams(n_mels=0)
    with pytest.raises(ValueError):
        SpectrogramParams(window_fn="hamming")
