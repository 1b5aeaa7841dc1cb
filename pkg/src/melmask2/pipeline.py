"""Two-stage enhancer: batch and streaming paths over one shared graph.

Stage 1 maps log-Mel features of the noisy magnitude to 64 Mel gains, which
are interpolated to the 512 linear bands, optionally post-filtered and
applied to the noisy spectrum (noisy phase kept).  Stage 2 sees
``[Re S1, Im S1, Re X, Im X]`` and predicts a correction that is added to the
stage-1 spectrum.  The Nyquist bin bypasses both stages with unity gain.

The graph functions below take arrays or autodiff nodes, so the trainer
differentiates exactly what inference runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import InvalidConfigError, InvalidInputError, StateError
from .mel import EPS_LOG, GainTensor, MelFilterBank, build_mel_filterbank
from .signal import (AudioBuffer, StftConfig, analyze_frames, frame_signal, synthesize_frames,
                     wav_read, wav_write)

MODES = ("stage1_only", "two_stage", "stage2_only_complex")


def sin_postfilter(g_hat):
    """``g * sin(pi/2 * g)``: pushes low gains down, leaves 0 and 1 fixed."""
    if isinstance(g_hat, ad.Node):
        return ad.mul(g_hat, ad.sin(ad.mul(g_hat, np.pi / 2)))
    scale = g_hat.scale if isinstance(g_hat, GainTensor) else None
    g = np.asarray(g_hat, dtype=np.float64)
    if g.size and (not np.all(np.isfinite(g)) or g.min() < 0 or g.max() > 1):
        raise InvalidInputError("post-filter input gains must lie in [0, 1]")
    out = g * np.sin(np.pi / 2 * g)
    return GainTensor(out, scale) if scale else out


@dataclass
class PipelineConfig:
    mode: str = "two_stage"
    postfilter: bool = False
    stft: StftConfig = field(default_factory=StftConfig)
    weights: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.mode == "stage2_only_complex":
            self.postfilter = False


# graph pieces shared by inference and training

def log_mel_features(noisy_bands, fb: MelFilterBank):
    """(2, T, F) noisy stack -> (T, n_mel) log-Mel magnitudes (no gradient)."""
    nv = ad.value_of(noisy_bands)
    mag = np.sqrt(nv[0] ** 2 + nv[1] ** 2)
    return np.log(mag @ fb.weights.T + EPS_LOG)


def apply_mel_gains(g_mel, noisy_bands, fb: MelFilterBank, postfilter=False):
    """Interpolate Mel gains, optionally post-filter, mask the noisy bands.

    Returns ``(linear_gains, masked_stack)``; the masked stack keeps the noisy
    phase because the gain is real.
    """
    g_lin = ad.clip(ad.matmul(g_mel, fb.interp.T), 0.0, 1.0)
    if postfilter:
        g_lin = sin_postfilter(g_lin)
    masked = ad.mul(ad.reshape(g_lin, (1,) + ad.value_of(g_lin).shape), noisy_bands)
    return g_lin, masked


def stage1_graph(model, noisy_bands, fb, params=None, h0=None, training=False, postfilter=False):
    feats = log_mel_features(noisy_bands, fb).astype(model.dtype)
    g_mel, h = nn.run(model, feats, params=params, h0=h0, training=training)
    g_lin, s1 = apply_mel_gains(g_mel, noisy_bands, fb, postfilter)
    return g_mel, s1, h


def stage2_graph(model, s1_bands, noisy_bands, params=None, h0=None, training=False):
    """Residual complex mapping: returns ``(S1 + correction, hidden)``."""
    x = ad.concat([s1_bands, noisy_bands], axis=0)  # (4, T, F)
    x = ad.transpose(x, (1, 0, 2))
    if not isinstance(x, ad.Node):
        x = x.astype(model.dtype)
    delta, h = nn.run(model, x, params=params, h0=h0, training=training)
    return ad.add(s1_bands, ad.transpose(delta, (1, 0, 2))), h


def _to_stack(full):
    return np.stack([full.real, full.imag])


def _from_stack(bands, full):
    """Reattach the passthrough bins to an enhanced ``(2, T, F)`` stack."""
    bv = ad.value_of(bands)
    out = full.copy()
    out[:, : bv.shape[2]] = bv[0] + 1j * bv[1]
    return out


@dataclass
class StreamState:
    ring: np.ndarray
    acc: np.ndarray
    hidden1: dict | None
    hidden2: dict | None
    primed: bool = False
    frames: int = 0


class Enhancer:
    """Runs one pipeline configuration over batches or a stream of hops.

    Model weights are shared and never mutated; every stream owns its own
    :class:`StreamState`.
    """

    def __init__(self, cfg: PipelineConfig | None = None, stage1: nn.ModelGraph | None = None,
                 stage2: nn.ModelGraph | None = None, fb: MelFilterBank | None = None):
        self.cfg = cfg or PipelineConfig()
        mode = self.cfg.mode
        if stage1 is None and stage2 is None and self.cfg.weights:
            loaded = [nn.load_weights(p) for p in self.cfg.weights]
            stage1 = next((m for m in loaded if m.meta.get("stage") == 1), None)
            stage2 = next((m for m in loaded if m.meta.get("stage") == 2), None)
        if mode in ("stage1_only", "two_stage") and stage1 is None:
            raise InvalidConfigError(f"mode {mode} needs stage-1 weights")
        if mode in ("two_stage", "stage2_only_complex") and stage2 is None:
            raise InvalidConfigError(f"mode {mode} needs stage-2 weights")
        for m, stage in ((stage1, 1), (stage2, 2)):
            if m is not None and m.meta.get("stage") != stage:
                raise InvalidConfigError(f"weights given for stage {stage} are for stage {m.meta.get('stage')}")
        self.stage1 = stage1 if mode != "stage2_only_complex" else None
        self.stage2 = stage2 if mode != "stage1_only" else None
        self.fb = fb or build_mel_filterbank(64, self.cfg.stft.n_bins_used)

    # core: T frames of full rfft bins -> enhanced full rfft bins
    def _process(self, full, h1=None, h2=None):
        n_bands = self.cfg.stft.n_bins_used
        noisy = _to_stack(full[:, :n_bands])
        s1, new_h1, new_h2 = noisy, None, None
        if self.stage1 is not None:
            _, s1, new_h1 = stage1_graph(self.stage1, noisy, self.fb, h0=h1,
                                         postfilter=self.cfg.postfilter)
        if self.stage2 is not None:
            s1, new_h2 = stage2_graph(self.stage2, s1, noisy, h0=h2)
        return _from_stack(np.asarray(s1, dtype=np.float64), full), new_h1, new_h2

    def padded_length(self, n):
        hop = self.cfg.stft.hop
        return -(-n // hop) * hop + hop

    def enhance(self, audio: AudioBuffer) -> AudioBuffer:
        """Whole-clip path; output has the input's length."""
        cfg = self.cfg.stft
        x = np.zeros(self.padded_length(len(audio)))
        x[: len(audio)] = audio.samples
        full = analyze_frames(frame_signal(x, cfg), cfg)
        enhanced, _, _ = self._process(full)
        frames = synthesize_frames(enhanced, cfg)
        out = np.zeros(len(x))
        for t in range(frames.shape[0]):
            out[t * cfg.hop: t * cfg.hop + cfg.window_len] += frames[t]
        return AudioBuffer(out[: len(audio)], audio.sample_rate)

    def new_stream(self) -> StreamState:
        w = self.cfg.stft.window_len
        return StreamState(np.zeros(w), np.zeros(w), None, None)

    def enhance_frame(self, state: StreamState, samples) -> np.ndarray:
        """Consume one hop of input, emit one hop of output delayed by one hop."""
        if state is None:
            raise StateError("stream state not initialised; call new_stream() first")
        cfg = self.cfg.stft
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        if samples.shape[0] != cfg.hop:
            raise InvalidInputError(f"chunk must have {cfg.hop} samples, got {samples.shape[0]}")
        state.ring[: -cfg.hop] = state.ring[cfg.hop:]
        state.ring[-cfg.hop:] = samples
        if not state.primed:
            state.primed = True
            return np.zeros(cfg.hop)
        full = analyze_frames(state.ring[None, :], cfg)
        enhanced, state.hidden1, state.hidden2 = self._process(full, state.hidden1, state.hidden2)
        state.acc += synthesize_frames(enhanced, cfg)[0]
        out = state.acc[: cfg.hop].copy()
        state.acc[: -cfg.hop] = state.acc[cfg.hop:]
        state.acc[-cfg.hop:] = 0.0
        state.frames += 1
        return out

    def enhance_streaming(self, audio: AudioBuffer) -> AudioBuffer:
        """Hop-by-hop path; the one-hop delay and tail flush are undone here."""
        hop = self.cfg.stft.hop
        x = np.zeros(self.padded_length(len(audio)))
        x[: len(audio)] = audio.samples
        state = self.new_stream()
        chunks = [self.enhance_frame(state, x[i: i + hop]) for i in range(0, len(x), hop)]
        out = np.concatenate(chunks)[hop:]
        return AudioBuffer(out[: len(audio)], audio.sample_rate)


def enhance_frame(state: StreamState, enhancer: Enhancer, samples) -> np.ndarray:
    return enhancer.enhance_frame(state, samples)


def enhance_file(in_path, out_path, cfg: PipelineConfig, enhancer: Enhancer | None = None) -> dict:
    """Stream a WAV file through the enhancer; returns ``{frames, rtf, seconds}``."""
    enhancer = enhancer or Enhancer(cfg)
    audio = wav_read(in_path)
    start = time.perf_counter()
    out = enhancer.enhance_streaming(audio)
    elapsed = time.perf_counter() - start
    wav_write(out_path, out)
    frames = enhancer.padded_length(len(audio)) // cfg.stft.hop - 1
    return {"frames": frames, "rtf": elapsed / max(audio.duration, 1e-12), "seconds": elapsed}


@dataclass
class RtfReport:
    mode: str
    frames: int
    mean_frame_ms: float
    p95_frame_ms: float
    std_frame_ms: float
    rtf: float
    frames_per_sec: float
    budget_ms: float

    def to_text(self) -> str:
        within = "within" if self.mean_frame_ms < self.budget_ms else "OVER"
        return (f"mode={self.mode} frames={self.frames} mean={self.mean_frame_ms:.3f}ms "
                f"p95={self.p95_frame_ms:.3f}ms rtf={self.rtf:.4f} "
                f"frames/s={self.frames_per_sec:.1f} budget={self.budget_ms:.1f}ms ({within})")

    def to_csv_row(self) -> str:
        return (f"{self.mode},{self.frames},{self.mean_frame_ms:.4f},{self.p95_frame_ms:.4f},"
                f"{self.rtf:.5f},{self.frames_per_sec:.2f},{self.budget_ms:.1f}")


RTF_CSV_HEADER = "mode,frames,mean_frame_ms,p95_frame_ms,rtf,frames_per_sec,budget_ms"


def bench_rtf(enhancer: Enhancer, seconds: float = 5.0, seed: int = 0, warmup: int = 10) -> RtfReport:
    """Per-hop wall time of the streaming path on synthetic noise."""
    cfg = enhancer.cfg.stft
    rng = np.random.default_rng(seed)
    n_hops = max(int(seconds * 32000 / cfg.hop), 1)
    x = 0.1 * rng.standard_normal((n_hops + warmup, cfg.hop))
    state = enhancer.new_stream()
    for chunk in x[:warmup]:
        enhancer.enhance_frame(state, chunk)
    times = np.empty(n_hops)
    for i, chunk in enumerate(x[warmup:]):
        t0 = time.perf_counter()
        enhancer.enhance_frame(state, chunk)
        times[i] = time.perf_counter() - t0
    hop_s = cfg.hop / 32000
    return RtfReport(
        mode=enhancer.cfg.mode, frames=n_hops, mean_frame_ms=1e3 * times.mean(),
        p95_frame_ms=1e3 * np.percentile(times, 95), std_frame_ms=1e3 * times.std(),
        rtf=times.sum() / (n_hops * hop_s), frames_per_sec=n_hops / times.sum(),
        budget_ms=1e3 * hop_s)
