"""Oracle inference: how much do Mel compression and the noisy phase cost?

Every condition resynthesises with the noisy phase; they differ only in the
magnitude that is attached to it:

* ``oracle_linear``: clipped ratio mask on the 512 linear bands,
* ``oracle_mel``: the same ratio computed on 64 Mel bands, interpolated back,
* ``mag_noisy_phase``: the clean magnitude itself (the best a magnitude-only
  objective can reach),
* ``closest_noisy_phase``: the point on the noisy-phase ray closest to the
  clean bin (projection), the ceiling for any noisy-phase estimate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .evalbench import mix_at_snr, si_sdr
from .mel import MelFilterBank, build_mel_filterbank, interpolate_gains, oracle_gains, to_mel
from .signal import AudioBuffer, ComplexSpectrogram, StftConfig, istft, stft

CSV_HEADER = ["snr_db", "oracle_linear", "oracle_mel", "mag_noisy_phase", "closest_noisy_phase"]


def _data(x):
    return x.data if isinstance(x, ComplexSpectrogram) else np.asarray(x, dtype=np.complex128)


def _pair(clean, noisy):
    s, x = _data(clean), _data(noisy)
    if s.shape != x.shape:
        raise InvalidInputError(f"shape mismatch {s.shape} vs {x.shape}")
    return s, x


def _rewrap(like, data):
    return like.with_data(data) if isinstance(like, ComplexSpectrogram) else data


def ideal_mag_noisy_phase(clean, noisy):
    """Clean magnitude on the noisy phase."""
    s, x = _pair(clean, noisy)
    return _rewrap(noisy, np.abs(s) * np.exp(1j * np.angle(x)))


def closest_noisy_phase(clean, noisy):
    """Projection of the clean bin onto the noisy-phase ray (nonnegative length)."""
    s, x = _pair(clean, noisy)
    unit = np.exp(1j * np.angle(x))
    length = np.maximum(0.0, np.real(s * np.conj(unit)))
    return _rewrap(noisy, length * unit)


@dataclass
class OracleRow:
    snr_db: float
    sisdr_oracle_linear: float
    sisdr_oracle_mel: float
    sisdr_mag_noisy_phase: float
    sisdr_closest_noisy_phase: float
    sisdr_mixture: float

    @property
    def mel_gap(self):
        return self.sisdr_oracle_linear - self.sisdr_oracle_mel

    @property
    def phase_gap(self):
        return self.sisdr_closest_noisy_phase - self.sisdr_mag_noisy_phase


@dataclass
class OracleReport:
    rows: list

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([f"{r.snr_db:.2f}", f"{r.sisdr_oracle_linear:.2f}", f"{r.sisdr_oracle_mel:.2f}",
                            f"{r.sisdr_mag_noisy_phase:.2f}", f"{r.sisdr_closest_noisy_phase:.2f}"])


def oracle_conditions(clean: AudioBuffer, noisy: AudioBuffer, fb: MelFilterBank | None = None,
                      cfg: StftConfig | None = None) -> dict:
    """Resynthesised audio for each oracle condition plus the analysis-synthesis references."""
    cfg = cfg or StftConfig()
    fb = fb or build_mel_filterbank(64, cfg.n_bins_used)
    S, X = stft(clean, cfg), stft(noisy, cfg)
    clean_mag, noisy_mag = np.abs(S.data), np.abs(X.data)
    g_lin = oracle_gains(clean_mag, noisy_mag, "linear").values
    g_mel = oracle_gains(to_mel(clean_mag, fb), to_mel(noisy_mag, fb), "mel")
    g_mel_lin = interpolate_gains(g_mel, fb).values
    return {
        "reference": istft(S),
        "mixture": istft(X),
        "oracle_linear": istft(X.with_data(g_lin * X.data)),
        "oracle_mel": istft(X.with_data(g_mel_lin * X.data)),
        "mag_noisy_phase": istft(ideal_mag_noisy_phase(S, X)),
        "closest_noisy_phase": istft(closest_noisy_phase(S, X)),
    }


def oracle_sweep(clean: AudioBuffer, noise: AudioBuffer, snrs, fb: MelFilterBank | None = None,
                 cfg: StftConfig | None = None) -> OracleReport:
    """SI-SDR of every oracle condition at each SNR.

    Scores are taken against the clean signal passed through the same
    analysis/synthesis, so framing edge effects cancel out.
    """
    snrs = list(snrs)
    if not snrs:
        raise InvalidConfigError("SNR list is empty")
    n = min(len(clean), len(noise))
    clean = AudioBuffer(clean.samples[:n], clean.sample_rate)
    noise = AudioBuffer(noise.samples[:n], noise.sample_rate)
    rows = []
    for snr in snrs:
        noisy = mix_at_snr(clean, noise, snr)
        out = oracle_conditions(clean, noisy, fb, cfg)
        ref = out["reference"]
        rows.append(OracleRow(
            float(snr),
            si_sdr(ref, out["oracle_linear"]),
            si_sdr(ref, out["oracle_mel"]),
            si_sdr(ref, out["mag_noisy_phase"]),
            si_sdr(ref, out["closest_noisy_phase"]),
            si_sdr(ref, out["mixture"]),
        ))
    return OracleReport(rows)
