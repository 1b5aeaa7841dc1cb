"""Toy-scale training: synthetic data, Adam, stage and joint trainers, schemes."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from . import autodiff as ad
from . import losses
from . import nn
from .errors import InvalidConfigError, NumericError, TrainingError
from .evalbench import mix_at_snr, si_sdr
from .mel import MelFilterBank, build_mel_filterbank, oracle_gains, to_mel
from .pipeline import Enhancer, PipelineConfig, _to_stack, stage1_graph, stage2_graph
from .signal import SAMPLE_RATE, AudioBuffer, StftConfig, analyze_frames, frame_signal

log = logging.getLogger(__name__)

SCHEMES = ("joint", "s1Lg_s2", "s1Lg_joint", "s1Lg_s2_joint", "s1L1_s2", "s1L1_joint", "s1L1_s2_joint")
SCHEME_LABELS = {
    "joint": "joint",
    "s1Lg_s2": "stage1(Lg)-stage2",
    "s1Lg_joint": "stage1(Lg)-joint",
    "s1Lg_s2_joint": "stage1(Lg)-stage2-joint",
    "s1L1_s2": "stage1(L1)-stage2",
    "s1L1_joint": "stage1(L1)-joint",
    "s1L1_s2_joint": "stage1(L1)-stage2-joint",
}


# data

@dataclass
class ToyDataset:
    pairs: list  # (clean, noise) AudioBuffer tuples
    seeds: list

    def __len__(self):
        return len(self.pairs)


def _toy_clean(rng, n):
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for _ in range(rng.integers(3, 6)):
        f0 = rng.uniform(100.0, 400.0)
        glide = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
        phase = 2 * np.pi * np.cumsum(f0 * glide) / SAMPLE_RATE
        tone = np.zeros(n)
        for h in range(1, rng.integers(4, 9)):
            if h * f0 * 1.1 > 7500:
                break
            tone += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
        rate = rng.uniform(1.5, 5.0)
        env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 2
        out += rng.uniform(0.3, 1.0) * env * tone
    return 0.1 * out / (np.sqrt(np.mean(out ** 2)) + 1e-12)


def _toy_noise(rng, n):
    noise = rng.standard_normal(n)
    if rng.random() < 0.5:
        lo = rng.uniform(100.0, 2000.0)
        hi = min(lo * rng.uniform(2.0, 8.0), 15000.0)
        sos = sps.butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        noise = sps.sosfilt(sos, noise)
    return 0.1 * noise / np.sqrt(np.mean(noise ** 2))


def synth_toy_dataset(n_pairs: int = 8, duration_s: float = 2.0, seed: int = 0) -> ToyDataset:
    """Harmonic-tone "speech" with syllable-rate envelopes, white or band-passed noise."""
    if n_pairs <= 0:
        raise InvalidConfigError("n_pairs must be positive")
    n = int(round(duration_s * SAMPLE_RATE))
    pairs, seeds = [], []
    for i in range(n_pairs):
        pair_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        rng = np.random.default_rng(pair_seed)
        pairs.append((AudioBuffer(_toy_clean(rng, n)), AudioBuffer(_toy_noise(rng, n))))
        seeds.append(pair_seed)
    return ToyDataset(pairs, seeds)


# optimiser

class Adam:
    """Bias-corrected Adam over a dict of named arrays, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise InvalidConfigError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k}; step rejected")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] -= update.astype(params[k].dtype)


def adam_step(params: dict, grads: dict, state: Adam, lr: float | None = None) -> None:
    if lr is not None:
        state.lr = lr
    state.step(params, grads)


# training

@dataclass
class TrainConfig:
    seed: int = 0
    learning_rate: float = 1e-3
    steps_per_phase: int = 200
    batch_frames: int | None = None  # crop length in frames; None = whole clip
    beta: float = losses.BETA
    p: float = 0.5
    postfilter_enabled: bool = False
    snr_range: tuple = (-5.0, 30.0)
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be positive")
        if self.steps_per_phase < 0:
            raise InvalidConfigError("steps_per_phase must be nonnegative")


@dataclass
class Example:
    clean: np.ndarray  # time signal, length matching the frames
    clean_bands: np.ndarray  # (2, T, F)
    noisy_full: np.ndarray  # (T, n_rfft) complex
    noisy_bands: np.ndarray  # (2, T, F)


def make_example(clean: AudioBuffer, noise: AudioBuffer, snr_db, cfg: StftConfig, rng=None,
                 batch_frames=None) -> Example:
    noisy = mix_at_snr(clean, noise, snr_db)
    s, x = clean.samples, noisy.samples
    if batch_frames:
        n = cfg.n_samples(batch_frames)
        start = int(rng.integers(0, (len(s) - n) // cfg.hop + 1)) * cfg.hop if len(s) > n else 0
        s, x = s[start: start + n], x[start: start + n]
    n_frames = cfg.n_frames(len(s))
    s = s[: cfg.n_samples(n_frames)]
    x = x[: cfg.n_samples(n_frames)]
    S = analyze_frames(frame_signal(s, cfg), cfg)
    X = analyze_frames(frame_signal(x, cfg), cfg)
    F = cfg.n_bins_used
    return Example(s, _to_stack(S[:, :F]), X, _to_stack(X[:, :F]))


def _synth(bands_node, ex: Example, cfg: StftConfig):
    """Enhanced bands + noisy passthrough bins -> differentiable time signal."""
    extra = _to_stack(ex.noisy_full[:, cfg.n_bins_used:])
    full = ad.concat([bands_node, extra], axis=2)
    return ad.istft_frames(full, cfg)


def _reference(ex: Example, cfg: StftConfig):
    # clean through the same analysis/synthesis, so framing edges cancel
    full = np.concatenate([ex.clean_bands, _to_stack(analyze_frames(
        frame_signal(ex.clean, cfg), cfg)[:, cfg.n_bins_used:])], axis=2)
    return ad.istft_frames(full, cfg)


def stage1_loss(model, params, ex: Example, kind: str, cfg: TrainConfig, fb: MelFilterBank):
    g_mel, s1, _ = stage1_graph(model, ex.noisy_bands, fb, params=params, training=True,
                                postfilter=cfg.postfilter_enabled)
    if kind == "Lg":
        clean_mag = np.hypot(ex.clean_bands[0], ex.clean_bands[1])
        noisy_mag = np.hypot(ex.noisy_bands[0], ex.noisy_bands[1])
        target = oracle_gains(to_mel(clean_mag, fb), to_mel(noisy_mag, fb)).values
        return losses.gain_loss(target.astype(model.dtype), g_mel, cfg.p)
    if kind == "L1":
        est = _synth(s1, ex, cfg.stft)
        return losses.loss_L1(_reference(ex, cfg.stft), est, cfg.stft, cfg.beta)
    raise InvalidConfigError(f"unknown stage-1 loss {kind!r}")


class _Phase:
    """Shared loop: sample a mixture, build the loss, step Adam on the trainable dict."""

    def __init__(self, data, cfg: TrainConfig, phase_seed):
        self.data, self.cfg = data, cfg
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, phase_seed]))

    def examples(self):
        lo, hi = self.cfg.snr_range
        for _ in range(self.cfg.steps_per_phase):
            clean, noise = self.data.pairs[int(self.rng.integers(len(self.data.pairs)))]
            snr = self.rng.uniform(lo, hi)
            yield make_example(clean, noise, snr, self.cfg.stft, self.rng, self.cfg.batch_frames)

    def run(self, trainable: dict, loss_fn) -> list:
        """``trainable`` maps prefixed names to arrays updated in place."""
        opt = Adam(self.cfg.learning_rate)
        curve = []
        for step, ex in enumerate(self.examples()):
            leaves = {k: ad.leaf(v) for k, v in trainable.items()}
            loss = loss_fn(leaves, ex)
            value = float(ad.value_of(loss))
            if not np.isfinite(value):
                raise TrainingError("loss diverged", step)
            loss.backward()
            grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value))
                     for k, n in leaves.items()}
            try:
                opt.step(trainable, grads)
            except NumericError as exc:
                raise TrainingError(str(exc), step) from exc
            curve.append(value)
        return curve


def _split(leaves, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in leaves.items() if k.startswith(prefix)}


def train_stage1(model: nn.ModelGraph, data: ToyDataset, loss: str = "L1", cfg: TrainConfig | None = None,
                 fb: MelFilterBank | None = None, phase_seed: int = 1):
    """Train the Mel masking model alone with ``Lg`` or ``L1``; returns ``(model, curve)``."""
    cfg = cfg or TrainConfig()
    fb = fb or build_mel_filterbank(64, cfg.stft.n_bins_used)
    phase = _Phase(data, cfg, phase_seed)
    curve = phase.run(model.weights, lambda p, ex: stage1_loss(model, p, ex, loss, cfg, fb))
    return model, curve


def train_stage2(stage2: nn.ModelGraph, stage1: nn.ModelGraph, data: ToyDataset,
                 cfg: TrainConfig | None = None, fb: MelFilterBank | None = None, phase_seed: int = 2,
                 channel_order=(0, 1, 2, 3)):
    """Train stage 2 on L2 behind a frozen stage 1 (inference mode, no tape)."""
    cfg = cfg or TrainConfig()
    fb = fb or build_mel_filterbank(64, cfg.stft.n_bins_used)

    def loss_fn(p, ex):
        _, s1, _ = stage1_graph(stage1, ex.noisy_bands, fb, postfilter=cfg.postfilter_enabled)
        est = _stage2_est(stage2, p, s1, ex, channel_order)
        return losses.loss_L2(ex.clean_bands, est, cfg.beta)

    curve = _Phase(data, cfg, phase_seed).run(stage2.weights, loss_fn)
    return stage2, curve


def _stage2_est(stage2, params, s1, ex, channel_order=(0, 1, 2, 3)):
    if tuple(channel_order) == (0, 1, 2, 3):
        est, _ = stage2_graph(stage2, s1, ex.noisy_bands, params=params, training=True)
        return est
    x = ad.concat([s1, ex.noisy_bands], axis=0)
    x = ad.concat([x[i: i + 1] for i in channel_order], axis=0)
    est, _ = stage2_graph(stage2, x[0:2], x[2:4], params=params, training=True)
    return est


def train_joint(stage1: nn.ModelGraph, stage2: nn.ModelGraph, data: ToyDataset,
                cfg: TrainConfig | None = None, fb: MelFilterBank | None = None, phase_seed: int = 3):
    """L2 on the stage-2 output with gradients flowing back into stage 1."""
    cfg = cfg or TrainConfig()
    fb = fb or build_mel_filterbank(64, cfg.stft.n_bins_used)
    trainable = {"s1/" + k: v for k, v in stage1.weights.items()}
    trainable.update({"s2/" + k: v for k, v in stage2.weights.items()})

    def loss_fn(p, ex):
        _, s1, _ = stage1_graph(stage1, ex.noisy_bands, fb, params=_split(p, "s1/"), training=True,
                                postfilter=cfg.postfilter_enabled)
        est, _ = stage2_graph(stage2, s1, ex.noisy_bands, params=_split(p, "s2/"), training=True)
        return losses.loss_L2(ex.clean_bands, est, cfg.beta)

    curve = _Phase(data, cfg, phase_seed).run(trainable, loss_fn)
    return stage1, stage2, curve


# schemes

def scheme_phases(scheme: str) -> list:
    if scheme not in SCHEMES:
        raise InvalidConfigError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if scheme == "joint":
        return ["joint"]
    first, *rest = scheme.split("_")
    return [f"stage1_{first[2:]}"] + [("stage2" if r == "s2" else "joint") for r in rest]


@dataclass
class SchemeResult:
    scheme: str
    stage1: nn.ModelGraph
    stage2: nn.ModelGraph
    curves: list  # (phase name, loss values)
    sisdr_in: float
    sisdr_out: float
    digests: list = field(default_factory=list)  # (phase, stage-1 digest, stage-2 digest) after each phase

    @property
    def improvement(self):
        return self.sisdr_out - self.sisdr_in


def toy_sisdr(enhancer: Enhancer, data: ToyDataset, snrs) -> tuple:
    """Mean SI-SDR of the unprocessed mixtures and of the enhanced output."""
    ins, outs = [], []
    for clean, noise in data.pairs:
        for snr in snrs:
            noisy = mix_at_snr(clean, noise, snr)
            ins.append(si_sdr(clean, noisy))
            outs.append(si_sdr(clean, enhancer.enhance(noisy)))
    return float(np.mean(ins)), float(np.mean(outs))


EVAL_SNRS = (-5.0, 0.0, 5.0, 10.0)


def run_scheme(scheme: str, data: ToyDataset, cfg: TrainConfig | None = None,
               eval_snrs=EVAL_SNRS) -> SchemeResult:
    cfg = cfg or TrainConfig()
    phases = scheme_phases(scheme)
    fb = build_mel_filterbank(64, cfg.stft.n_bins_used)
    stage1 = nn.build_stage1(cfg.seed)
    stage2 = nn.build_stage2(cfg.seed + 1)
    curves, digests = [], [("init", stage1.digest(), stage2.digest())]
    for i, phase in enumerate(phases, start=1):
        log.info("scheme %s phase %d/%d: %s", scheme, i, len(phases), phase)
        if phase.startswith("stage1_"):
            _, curve = train_stage1(stage1, data, phase.split("_")[1], cfg, fb, phase_seed=10 * i + 1)
        elif phase == "stage2":
            _, curve = train_stage2(stage2, stage1, data, cfg, fb, phase_seed=10 * i + 2)
        else:
            _, _, curve = train_joint(stage1, stage2, data, cfg, fb, phase_seed=10 * i + 3)
        curves.append((phase, curve))
        digests.append((phase, stage1.digest(), stage2.digest()))
    enhancer = Enhancer(PipelineConfig(mode="two_stage"), stage1, stage2, fb)
    sisdr_in, sisdr_out = toy_sisdr(enhancer, data, eval_snrs)
    return SchemeResult(scheme, stage1, stage2, curves, sisdr_in, sisdr_out, digests)


def write_curves_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "phase", "step", "loss"])
        for r in results:
            for phase, curve in r.curves:
                for step, value in enumerate(curve):
                    w.writerow([r.scheme, phase, step, f"{value:.6g}"])


def write_summary_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "final_sisdr_db"])
        for r in sorted(results, key=lambda r: SCHEMES.index(r.scheme)):
            w.writerow([r.scheme, f"{r.sisdr_out:.4f}"])


def save_checkpoint(result: SchemeResult, directory) -> tuple:
    """Write ``<scheme>_stage1.bin`` and ``<scheme>_stage2.bin``; returns both paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = (d / f"{result.scheme}_stage1.bin", d / f"{result.scheme}_stage2.bin")
    nn.save_weights(result.stage1, paths[0])
    nn.save_weights(result.stage2, paths[1])
    return paths
