"""Time-frequency analysis/synthesis and WAV I/O.

Framing is causal: frame ``t`` covers samples ``[t*hop, t*hop + window_len)``,
there is no centre padding and a trailing partial frame is dropped.  The
640-sample Hann frame is zero padded to a 1024-point FFT; bins 0..511 are the
512 "linear bands" seen by models and losses, bin 512 (Nyquist) rides along
in ``ComplexSpectrogram.nyquist`` so that synthesis stays exact.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import FormatError, InvalidConfigError, InvalidInputError, UnsupportedRateError

SAMPLE_RATE = 32000


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InvalidConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 640
    hop: int = 320
    fft_size: int = 1024
    n_bins_used: int = 512

    def __post_init__(self):
        if self.window_len <= 0 or self.window_len % 2:
            raise InvalidConfigError("window_len must be even and positive")
        if self.hop * 2 != self.window_len:
            raise InvalidConfigError("hop must be window_len / 2")
        if self.fft_size < self.window_len:
            raise InvalidConfigError("fft_size must be >= window_len")
        if not 0 < self.n_bins_used <= self.fft_size // 2 + 1:
            raise InvalidConfigError("n_bins_used out of range")

    @property
    def n_rfft(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop + 1

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.window_len


@dataclass
class ComplexSpectrogram:
    """``data`` is T x n_bins_used complex; ``nyquist`` holds the remaining rfft bins."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    nyquist: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2 or self.data.shape[1] != self.config.n_bins_used:
            raise InvalidInputError(
                f"spectrogram must be T x {self.config.n_bins_used}, got {self.data.shape}")
        n_extra = self.config.n_rfft - self.config.n_bins_used
        if self.nyquist is None:
            self.nyquist = np.zeros((self.frames, n_extra), dtype=np.complex128)
        self.nyquist = np.asarray(self.nyquist, dtype=np.complex128).reshape(self.frames, n_extra)
        if not (np.all(np.isfinite(self.data)) and np.all(np.isfinite(self.nyquist))):
            raise InvalidInputError("spectrogram contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def bins(self) -> int:
        return self.data.shape[1]

    @property
    def full(self) -> np.ndarray:
        """All rfft bins, T x (fft_size/2 + 1)."""
        return np.concatenate([self.data, self.nyquist], axis=1)

    def with_data(self, data) -> "ComplexSpectrogram":
        """Same framing and Nyquist passthrough, new band data."""
        return ComplexSpectrogram(data, self.config, self.nyquist.copy())


def make_hann(window_len: int) -> np.ndarray:
    """Periodic (DFT-even) Hann window."""
    if window_len <= 0 or window_len % 2:
        raise InvalidConfigError(f"Hann length must be even and positive, got {window_len}")
    n = np.arange(window_len)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / window_len))


def synthesis_window(cfg: StftConfig) -> np.ndarray:
    """Hann divided by the steady-state overlap-added squared window.

    The same normalisation is used at the clip edges, so batch and streaming
    synthesis agree sample for sample; edges are simply attenuated.
    """
    w = make_hann(cfg.window_len)
    w2 = w * w
    denom = w2[: cfg.hop] + w2[cfg.hop:]
    return w / np.tile(denom, cfg.window_len // cfg.hop)


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = cfg.n_frames(x.shape[-1])
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return x[..., idx]


def analyze_frames(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Windowed rfft of ``(..., window_len)`` frames -> ``(..., n_rfft)`` complex."""
    return np.fft.rfft(frames * make_hann(cfg.window_len), n=cfg.fft_size, axis=-1)


def synthesize_frames(full: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Inverse rfft truncated to the window, times the synthesis window."""
    y = np.fft.irfft(full, n=cfg.fft_size, axis=-1)[..., : cfg.window_len]
    return y * synthesis_window(cfg)


def overlap_add(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = frames.shape[0]
    out = np.zeros(cfg.n_samples(n_frames), dtype=frames.dtype)
    # 50% overlap: the two half-frame streams tile the output exactly
    for half in range(cfg.window_len // cfg.hop):
        lo = half * cfg.hop
        out[lo: lo + n_frames * cfg.hop] += frames[:, lo: lo + cfg.hop].reshape(-1)
    return out


def stft(audio: AudioBuffer, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    if audio.sample_rate != SAMPLE_RATE:
        raise FormatError(f"expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate} Hz")
    if len(audio) < cfg.window_len:
        raise InvalidInputError(
            f"audio has {len(audio)} samples, need at least {cfg.window_len}")
    full = analyze_frames(frame_signal(audio.samples, cfg), cfg)
    return ComplexSpectrogram(full[:, : cfg.n_bins_used], cfg, full[:, cfg.n_bins_used:])


def istft(spec: ComplexSpectrogram, cfg: StftConfig | None = None) -> AudioBuffer:
    if cfg is not None and cfg != spec.config:
        raise InvalidConfigError("synthesis config differs from the spectrogram's analysis config")
    cfg = spec.config
    if spec.frames == 0:
        return AudioBuffer(np.zeros(0))
    return AudioBuffer(overlap_add(synthesize_frames(spec.full, cfg), cfg))


def wav_read(path) -> AudioBuffer:
    """Read a 32 kHz PCM16 or float32 WAV; the first channel is kept."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, wave.Error) as exc:
        raise FormatError(f"cannot parse WAV file {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"{path}: sample rate {rate} Hz unsupported, need {SAMPLE_RATE} Hz")
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    return AudioBuffer(samples, rate)


def wav_write(path, audio: AudioBuffer, pcm16: bool = False) -> None:
    if pcm16:
        data = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = audio.samples.astype(np.float32)
    wavfile.write(path, audio.sample_rate, data)
