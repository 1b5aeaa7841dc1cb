"""SNR-controlled mixing, SI-SDR and multi-condition evaluation sweeps."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .signal import AudioBuffer

SISDR_CAP_DB = 60.0
PROTOCOL_SNRS = tuple(range(-5, 31, 5))


def power(x) -> float:
    x = x.samples if isinstance(x, AudioBuffer) else np.asarray(x)
    return float(np.mean(x * x))


def noise_scale(speech, noise, snr_db: float) -> float:
    ps, pn = power(speech), power(noise)
    if ps == 0 or pn == 0:
        raise InvalidInputError("speech and noise must both have nonzero power")
    return float(np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(speech: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    """``speech + alpha * noise`` with alpha chosen for the requested full-clip SNR."""
    if len(speech) != len(noise):
        raise InvalidInputError(f"length mismatch: {len(speech)} vs {len(noise)}")
    alpha = noise_scale(speech, noise, snr_db)
    return AudioBuffer(speech.samples + alpha * noise.samples, speech.sample_rate)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, clipped to +-60 dB."""
    s = reference.samples if isinstance(reference, AudioBuffer) else np.asarray(reference, dtype=np.float64)
    e = estimate.samples if isinstance(estimate, AudioBuffer) else np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise InvalidInputError(f"length mismatch: {s.shape} vs {e.shape}")
    ss = float(s @ s)
    if ss == 0:
        raise InvalidInputError("reference signal is all zeros")
    target = (float(e @ s) / ss) * s
    resid = e - target
    num, den = float(target @ target), float(resid @ resid)
    if den == 0:
        return SISDR_CAP_DB
    if num == 0:
        return -SISDR_CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -SISDR_CAP_DB, SISDR_CAP_DB))


@dataclass
class EvalRow:
    snr_db: float
    sisdr_in: float
    sisdr_out: float
    label: str

    def __post_init__(self):
        if not self.label:
            raise InvalidInputError("evaluation rows need a condition label")


@dataclass
class EvalSummary:
    label: str
    snr_db: float
    n: int
    sisdr_in_mean: float
    sisdr_out_mean: float
    ci95: float


def ci95(values) -> float:
    """Normal-approximation half width, 1.96 * sd / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / np.sqrt(v.size))


def _score_cell(args):
    enhancer, speech, noise, snr, label = args
    noisy = mix_at_snr(speech, noise, snr)
    out = enhancer.enhance(noisy)
    return EvalRow(float(snr), si_sdr(speech, noisy), si_sdr(speech, out), label)


def evaluate(enhancer, pairs, snrs=PROTOCOL_SNRS, label: str | None = None, jobs: int = 1) -> list:
    """Mix every (clean, noise) pair at every SNR, enhance, and score in and out.

    ``enhancer`` is an ``Enhancer`` or a ``PipelineConfig`` naming weight files.
    """
    if not hasattr(enhancer, "enhance"):
        from .pipeline import Enhancer
        enhancer = Enhancer(enhancer)
    pairs = list(getattr(pairs, "pairs", pairs))
    snrs = list(snrs)
    if not pairs or not snrs:
        raise InvalidInputError("evaluation needs at least one pair and one SNR")
    label = label or _default_label(enhancer)
    cells = [(enhancer, s, n, snr, label) for s, n in pairs for snr in snrs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_score_cell, cells))
    return [_score_cell(c) for c in cells]


def _default_label(enhancer):
    cfg = getattr(enhancer, "cfg", None)
    if cfg is None:
        return "custom"
    return f"{cfg.mode}{'+pf' if cfg.postfilter else ''}"


def summarize(rows) -> list:
    """Per (label, SNR) mean scores with 95% confidence interval of the output score."""
    groups = {}
    for r in rows:
        groups.setdefault((r.label, r.snr_db), []).append(r)
    out = []
    for (label, snr), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        outs = [r.sisdr_out for r in rs]
        out.append(EvalSummary(label, snr, len(rs), float(np.mean([r.sisdr_in for r in rs])),
                               float(np.mean(outs)), ci95(outs)))
    return out


def write_summary_csv(path, summaries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "snr_db", "n", "sisdr_in_mean", "sisdr_out_mean", "ci95"])
        for s in summaries:
            w.writerow([s.label, f"{s.snr_db:g}", s.n, f"{s.sisdr_in_mean:.4f}",
                        f"{s.sisdr_out_mean:.4f}", f"{s.ci95:.4f}"])
