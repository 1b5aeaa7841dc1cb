"""Mel filter bank, Mel compression and Mel -> linear gain interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .signal import SAMPLE_RATE

EPS_LOG = 1e-7
EPS_DIV = 1e-8


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class GainTensor:
    """frames x bands gains in [0, 1], tagged with the band scale."""

    values: np.ndarray
    scale: str = "mel"

    def __post_init__(self):
        if self.scale not in ("mel", "linear"):
            raise InvalidConfigError(f"unknown gain scale {self.scale!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        _check_unit_range(self.values, "gains")

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape


def _check_unit_range(x, what):
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{what} contain non-finite values")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise InvalidInputError(f"{what} must lie in [0, 1], got [{x.min():.4g}, {x.max():.4g}]")


@dataclass(frozen=True)
class MelFilterBank:
    weights: np.ndarray  # n_mel x n_lin, unit-peak triangles
    interp: np.ndarray  # n_lin x n_mel, rows sum to 1 on covered bins

    @property
    def n_mel(self) -> int:
        return self.weights.shape[0]

    @property
    def n_lin(self) -> int:
        return self.weights.shape[1]

    @property
    def covered(self) -> np.ndarray:
        return self.weights.sum(axis=0) > 0

    def dump_csv(self, path) -> None:
        np.savetxt(path, self.weights, delimiter=",", fmt="%.10g")


def build_mel_filterbank(n_mel: int = 64, n_lin: int = 512, sample_rate: int = SAMPLE_RATE,
                         fft_size: int | None = None) -> MelFilterBank:
    """HTK-Mel triangles spanning 0 Hz .. sample_rate/2.

    Bin ``k`` sits at ``k * sample_rate / fft_size`` (``fft_size`` defaults to
    ``2 * n_lin``).  The lowest filter is held flat below its centre so the
    DC bin is covered too.
    """
    if n_mel <= 0 or n_mel >= n_lin:
        raise InvalidConfigError(f"need 0 < n_mel < n_lin, got n_mel={n_mel}, n_lin={n_lin}")
    fft_size = fft_size or 2 * n_lin
    freqs = np.arange(n_lin) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mel + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    weights[0, freqs <= edges[1]] = 1.0

    col = weights.sum(axis=0)
    interp = np.divide(weights.T, col[:, None], out=np.zeros_like(weights.T), where=col[:, None] > 0)
    weights.setflags(write=False)
    interp.setflags(write=False)
    return MelFilterBank(weights, interp)


def to_mel(mag, fb: MelFilterBank) -> np.ndarray:
    mag = np.asarray(mag, dtype=np.float64)
    if mag.size and mag.min() < 0:
        raise InvalidInputError("magnitudes must be nonnegative")
    return mag @ fb.weights.T


def log_compress(mel_mag) -> np.ndarray:
    return np.log(np.asarray(mel_mag, dtype=np.float64) + EPS_LOG)


def interpolate_gains(g_mel, fb: MelFilterBank) -> GainTensor:
    g = np.asarray(g_mel, dtype=np.float64)
    _check_unit_range(g, "Mel gains")
    return GainTensor(np.clip(g @ fb.interp.T, 0.0, 1.0), "linear")


def oracle_gains(clean_mag, noisy_mag, scale: str = "mel") -> GainTensor:
    """|S| / (|X| + eps), clipped to [0, 1].  Mel inputs must come from ``to_mel``."""
    clean_mag = np.asarray(clean_mag, dtype=np.float64)
    noisy_mag = np.asarray(noisy_mag, dtype=np.float64)
    if clean_mag.shape != noisy_mag.shape:
        raise InvalidInputError(f"shape mismatch {clean_mag.shape} vs {noisy_mag.shape}")
    if (clean_mag.size and clean_mag.min() < 0) or (noisy_mag.size and noisy_mag.min() < 0):
        raise InvalidInputError("magnitudes must be nonnegative")
    return GainTensor(np.clip(clean_mag / (noisy_mag + EPS_DIV), 0.0, 1.0), scale)
