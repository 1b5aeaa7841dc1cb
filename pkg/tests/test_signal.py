import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.io import wavfile

from melmask2.errors import FormatError, InvalidConfigError, InvalidInputError, UnsupportedRateError
from melmask2.signal import (AudioBuffer, ComplexSpectrogram, StftConfig, istft, make_hann, stft,
                             synthesis_window, wav_read, wav_write)

CFG = StftConfig()


def interior(n, cfg=CFG):
    return slice(cfg.window_len, n - cfg.window_len)


def test_hann_endpoints():
    w = make_hann(640)
    assert w[0] == 0.0
    assert w[320] == 1.0


def test_hann_rejects_odd_and_zero():
    with pytest.raises(InvalidConfigError):
        make_hann(641)
    with pytest.raises(InvalidConfigError):
        make_hann(0)


def test_hann_cola_against_closed_form():
    # oracle: sin^2 + cos^2 = 1 for the two half-shifted copies
    n = np.arange(320)
    expected = np.sin(np.pi * n / 640) ** 2 + np.sin(np.pi * (n + 320) / 640) ** 2
    w = make_hann(640)
    np.testing.assert_allclose(w[:320] + w[320:], expected, atol=1e-15)
    np.testing.assert_allclose(w[:320] + w[320:], 1.0, atol=1e-12)


def test_synthesis_normalisation_is_cola():
    w = make_hann(640)
    ws = synthesis_window(CFG)
    prod = w * ws
    np.testing.assert_allclose(prod[:320] + prod[320:], 1.0, atol=1e-9)


@pytest.mark.parametrize("kwargs", [dict(hop=300), dict(fft_size=512), dict(n_bins_used=600),
                                    dict(window_len=641, hop=320)])
def test_config_validation(kwargs):
    with pytest.raises(InvalidConfigError):
        StftConfig(**kwargs)


def test_sine_peak_bin():
    t = np.arange(32000) / 32000
    spec = stft(AudioBuffer(np.sin(2 * np.pi * 1000 * t)))
    # oracle: 1000 / 32000 * 1024
    assert int(np.argmax(np.abs(spec.data).mean(axis=0))) == round(1000 / 32000 * 1024)


def test_zero_audio_gives_zero_spectrum():
    spec = stft(AudioBuffer(np.zeros(4000)))
    assert not np.any(spec.data)
    assert not np.any(istft(spec).samples)


def test_ten_seconds_about_thousand_frames():
    assert 999 <= CFG.n_frames(320000) <= 1001


def test_stft_errors():
    with pytest.raises(InvalidInputError):
        stft(AudioBuffer(np.zeros(100)))
    with pytest.raises(FormatError):
        stft(AudioBuffer(np.zeros(4000), sample_rate=16000))


def test_istft_config_mismatch():
    spec = stft(AudioBuffer(np.zeros(4000)))
    with pytest.raises(InvalidConfigError):
        istft(spec, StftConfig(fft_size=2048))


def test_spectrogram_shape_contract():
    with pytest.raises(InvalidInputError):
        ComplexSpectrogram(np.zeros((3, 100)))
    spec = stft(AudioBuffer(np.ones(1280)))
    assert spec.bins == 512 and spec.full.shape[1] == 513


def test_round_trip_sine():
    t = np.arange(32000) / 32000
    x = np.sin(2 * np.pi * 1000 * t)
    y = istft(stft(AudioBuffer(x))).samples
    sl = interior(len(y))
    assert np.sqrt(np.mean((y[sl] - x[sl]) ** 2) / np.mean(x[sl] ** 2)) < 1e-6


def test_parseval():
    rng = np.random.default_rng(0)
    x = rng.normal(size=3200)
    spec = stft(AudioBuffer(x))
    frames = x[np.arange(640)[None, :] + 320 * np.arange(spec.frames)[:, None]] * make_hann(640)
    full = np.fft.fft(frames, n=1024, axis=-1)
    spec_energy = np.sum(np.abs(full) ** 2) / 1024
    # one-sided bins reproduce the same energy with doubling of the interior bins
    half = spec.full
    one_sided = (np.sum(np.abs(half[:, 1:-1]) ** 2) * 2 + np.sum(np.abs(half[:, [0, -1]]) ** 2)) / 1024
    np.testing.assert_allclose(spec_energy, np.sum(frames ** 2), rtol=1e-6)
    np.testing.assert_allclose(one_sided, np.sum(frames ** 2), rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(2000, 6000), elements=st.floats(-1, 1)))
def test_round_trip_property(x):
    y = istft(stft(AudioBuffer(x))).samples
    sl = slice(640, len(y) - 640)
    ref = x[sl]
    energy = np.mean(ref ** 2)
    err = np.mean((y[sl] - ref) ** 2)
    assert err <= 1e-12 * max(energy, 1e-300) or err < 1e-28


def test_wav_float_round_trip(tmp_path):
    x = np.random.default_rng(1).uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
    wav_write(tmp_path / "a.wav", AudioBuffer(x))
    np.testing.assert_array_equal(wav_read(tmp_path / "a.wav").samples, x)


def test_wav_pcm16_scale(tmp_path):
    wavfile.write(tmp_path / "p.wav", 32000, np.array([-32768, 0, 16384], dtype=np.int16))
    np.testing.assert_array_equal(wav_read(tmp_path / "p.wav").samples, [-1.0, 0.0, 0.5])


def test_wav_first_channel(tmp_path):
    data = np.array([[0.5, -0.5], [0.25, -0.25]], dtype=np.float32)
    wavfile.write(tmp_path / "s.wav", 32000, data)
    np.testing.assert_array_equal(wav_read(tmp_path / "s.wav").samples, [0.5, 0.25])


def test_wav_wrong_rate(tmp_path):
    wavfile.write(tmp_path / "r.wav", 16000, np.zeros(10, dtype=np.float32))
    with pytest.raises(UnsupportedRateError):
        wav_read(tmp_path / "r.wav")


def test_wav_malformed(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF\x00\x00junkjunk")
    with pytest.raises(FormatError):
        wav_read(tmp_path / "bad.wav")


def test_audio_buffer_validation():
    with pytest.raises(InvalidInputError):
        AudioBuffer(np.array([0.0, np.nan]))
    with pytest.raises(InvalidConfigError):
        AudioBuffer(np.zeros(3), sample_rate=0)
