"""Named finite-difference checks for every training objective.

Each case is ``(loss_fn, params)`` ready for :func:`losses.grad_check`.
The ``*_mel_istft`` cases differentiate through Mel gain interpolation,
masking and the inverse STFT, the path stage-1 training relies on.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from .mel import build_mel_filterbank
from .pipeline import apply_mel_gains
from .signal import StftConfig

CASES = ("Lg", "Lmag", "Lasym", "Lsisnr", "L1", "Lphase", "L2", "L1_mel_istft", "L2_mel")


def _masking_setup(rng, cfg, n_frames):
    fb = build_mel_filterbank(64, cfg.n_bins_used)
    noisy = rng.normal(size=(2, n_frames, cfg.n_rfft))
    clean_t = 0.1 * rng.normal(size=cfg.n_samples(n_frames))
    g_mel = rng.uniform(0.1, 0.9, size=(n_frames, 64))
    return fb, noisy, clean_t, g_mel


def build_case(name: str, seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = StftConfig()
    T, F = 6, cfg.n_bins_used
    if name == "Lg":
        g = rng.uniform(0.0, 1.0, size=(T, 64))
        return (lambda p: L.gain_loss(g, p["g_hat"], 0.5)), {"g_hat": rng.uniform(0.05, 0.95, size=(T, 64))}
    if name in ("Lmag", "Lasym"):
        fn = L.mag_loss if name == "Lmag" else L.asym_loss
        clean = rng.uniform(0.1, 2.0, size=(T, F))
        return (lambda p: fn(clean, p["est"])), {"est": rng.uniform(0.1, 2.0, size=(T, F))}
    if name == "Lsisnr":
        s = rng.normal(size=4000)
        return (lambda p: L.sisnr_loss(s, p["est"])), {"est": s + 0.5 * rng.normal(size=4000)}
    if name == "L1":
        s = 0.1 * rng.normal(size=cfg.n_samples(T))
        return (lambda p: L.loss_L1(s, p["est"], cfg)), {"est": s + 0.05 * rng.normal(size=s.shape)}
    if name in ("Lphase", "L2"):
        fn = L.phase_loss if name == "Lphase" else L.loss_L2
        S = rng.normal(size=(2, T, F))
        return (lambda p: fn(S, p["est"])), {"est": S + 0.5 * rng.normal(size=S.shape)}
    if name == "L1_mel_istft":
        fb, noisy, clean_t, g_mel = _masking_setup(rng, cfg, T)

        def fn(p):
            _, masked = apply_mel_gains(p["g_mel"], noisy[:, :, :F], fb)
            est = ad.istft_frames(ad.concat([masked, noisy[:, :, F:]], axis=2), cfg)
            return L.loss_L1(clean_t, est, cfg)
        return fn, {"g_mel": g_mel}
    if name == "L2_mel":
        fb, noisy, _, g_mel = _masking_setup(rng, cfg, T)
        S = rng.normal(size=(2, T, F))

        def fn(p):
            _, masked = apply_mel_gains(p["g_mel"], noisy[:, :, :F], fb)
            return L.loss_L2(S, masked)
        return fn, {"g_mel": g_mel}
    raise ValueError(f"unknown gradient check case {name!r}; choose from {CASES}")


# The losses are means over thousands of elements, so single-element
# gradients sit near 1e-4; a probe that happens to land where the estimate
# matches the target has a true slope near zero, and is judged absolutely.
ABS_FLOOR = 1e-6


def run_case(name: str, seed: int = 0, n_probes: int = 50) -> L.GradCheckReport:
    fn, params = build_case(name, seed)
    return L.grad_check(fn, params, n_probes=n_probes, seed=seed, abs_floor=ABS_FLOOR)
