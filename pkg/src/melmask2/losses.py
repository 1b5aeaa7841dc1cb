"""Training objectives and a finite-difference gradient checker.

Losses accept plain arrays or autodiff ``Node`` objects.  Complex spectra are
handled as real/imaginary stacks of shape ``(2, T, F)``; complex arrays and
``ComplexSpectrogram`` objects are converted on entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfigError, InvalidInputError, NumericError
from .signal import AudioBuffer, ComplexSpectrogram, StftConfig

SISNR_EPS = 1e-8
SISNR_CAP_DB = 60.0
MAG_FLOOR = 1e-12
BETA = 0.5


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)


def loss_and_grads(fn, **inputs) -> LossValue:
    """Evaluate ``fn(**inputs)`` on a tape and return its value plus input gradients."""
    leaves = {k: ad.leaf(np.asarray(v, dtype=np.float64)) for k, v in inputs.items()}
    out = fn(**leaves)
    if not isinstance(out, ad.Node):
        return LossValue(float(out), {k: np.zeros_like(v.value) for k, v in leaves.items()})
    out.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
    return LossValue(float(out.value), grads)


def _samples(x):
    return x.samples if isinstance(x, AudioBuffer) else x


def as_stack(x):
    """Complex input -> ``(2, T, F)`` real stack; Nodes pass through untouched."""
    if isinstance(x, ad.Node):
        return x
    if isinstance(x, ComplexSpectrogram):
        x = x.data
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return np.stack([x.real, x.imag])
    return x


def _check_nonneg(*xs):
    for x in xs:
        v = ad.value_of(x)
        if v.size and v.min() < 0:
            raise InvalidInputError("magnitudes must be nonnegative")


def _check_same_shape(a, b):
    if ad.value_of(a).shape != ad.value_of(b).shape:
        raise InvalidInputError(
            f"shape mismatch {ad.value_of(a).shape} vs {ad.value_of(b).shape}")


def _mse(a, b):
    d = ad.sub(a, b)
    return ad.mean(ad.mul(d, d))


def gain_loss(g, g_hat, p: float = 0.5):
    """Mean squared error of gains raised to the power ``p``."""
    if p <= 0:
        raise InvalidConfigError(f"gain power factor must be positive, got {p}")
    _check_same_shape(g, g_hat)
    return _mse(ad.power(g, p, floor=MAG_FLOOR), ad.power(g_hat, p, floor=MAG_FLOOR))


def mag_loss(clean_mag, est_mag, beta: float = BETA):
    _check_nonneg(clean_mag, est_mag)
    _check_same_shape(clean_mag, est_mag)
    return _mse(ad.power(clean_mag, beta, floor=MAG_FLOOR), ad.power(est_mag, beta, floor=MAG_FLOOR))


def asym_loss(clean_mag, est_mag, beta: float = BETA):
    """Penalises only under-estimated (attenuated) bins."""
    _check_nonneg(clean_mag, est_mag)
    _check_same_shape(clean_mag, est_mag)
    d = ad.relu(ad.sub(ad.power(clean_mag, beta, floor=MAG_FLOOR),
                       ad.power(est_mag, beta, floor=MAG_FLOOR)))
    return ad.mean(ad.mul(d, d))


def scale_factor(s, s_hat):
    """Optimal scaling of the target onto the estimate."""
    s, s_hat = _samples(s), _samples(s_hat)
    return ad.div(ad.sum(ad.mul(s_hat, s)), ad.sum(ad.mul(s, s)))


def sisnr_loss(s, s_hat):
    """Negative scale-invariant SNR in dB, clipped to +-60 dB.

    The epsilon added to both energies is relative to the estimate energy,
    which keeps the loss exactly invariant to rescaling ``s_hat``.
    """
    s, s_hat = _samples(s), _samples(s_hat)
    _check_same_shape(s, s_hat)
    sv = np.asarray(ad.value_of(s))
    if not np.any(sv):
        raise InvalidInputError("SI-SNR target is all zeros")
    kappa = scale_factor(s, s_hat)
    target = ad.mul(kappa, s)
    resid = ad.sub(target, s_hat)
    eps = ad.mul(ad.sum(ad.mul(s_hat, s_hat)), SISNR_EPS)
    num = ad.add(ad.sum(ad.mul(target, target)), eps)
    den = ad.add(ad.sum(ad.mul(resid, resid)), eps)
    tiny = np.finfo(np.float64).tiny
    ratio = ad.div(ad.add(num, tiny), ad.add(den, tiny))
    loss = ad.mul(ad.log(ratio), -10.0 / np.log(10.0))
    return ad.clip(loss, -SISNR_CAP_DB, SISNR_CAP_DB)


def squared_magnitude(stack):
    return ad.add(ad.mul(stack[0], stack[0]), ad.mul(stack[1], stack[1]))


def magnitude(stack):
    return ad.power(squared_magnitude(stack), 0.5, floor=MAG_FLOOR ** 2)


def compressed_complex(stack, c):
    """``|X|^c exp(i angle X)`` as a real stack; zero bins stay zero."""
    m2 = squared_magnitude(stack)
    factor = ad.power(ad.clip(m2, MAG_FLOOR ** 2, np.inf), (c - 1.0) / 2.0)
    return ad.concat([ad.reshape(ad.mul(stack[0], factor), (1,) + m2.shape),
                      ad.reshape(ad.mul(stack[1], factor), (1,) + m2.shape)], axis=0)


def phase_loss(clean, est, exponent: float = BETA):
    """Mean squared distance between magnitude-compressed complex spectra."""
    clean, est = as_stack(clean), as_stack(est)
    _check_same_shape(clean, est)
    d = ad.sub(compressed_complex(clean, exponent), compressed_complex(est, exponent))
    return ad.mean(squared_magnitude(d))


def band_stack(audio, cfg: StftConfig):
    """Signal -> ``(2, T, n_bins_used)`` stack via the differentiable STFT."""
    full = ad.stft_frames(_samples(audio), cfg)
    return full[:, :, : cfg.n_bins_used]


def loss_L1(clean, est, cfg: StftConfig | None = None, beta: float = BETA):
    """``(L_mag + L_asym) * F + 2 * L_SI-SNR`` with F the number of linear bands."""
    cfg = cfg or StftConfig()
    clean, est = _samples(clean), _samples(est)
    _check_same_shape(clean, est)
    clean_mag = magnitude(band_stack(clean, cfg))
    est_mag = magnitude(band_stack(est, cfg))
    spectral = ad.add(mag_loss(clean_mag, est_mag, beta), asym_loss(clean_mag, est_mag, beta))
    return ad.add(ad.mul(spectral, float(cfg.n_bins_used)), ad.mul(sisnr_loss(clean, est), 2.0))


def loss_L2(clean, est, beta: float = BETA):
    """Magnitude loss plus phase-aware loss on complex spectra."""
    clean, est = as_stack(clean), as_stack(est)
    _check_same_shape(clean, est)
    return ad.add(mag_loss(magnitude(clean), magnitude(est), beta), phase_loss(clean, est, beta))


@dataclass
class GradCheckReport:
    probes: list  # (name, index, analytic, numeric, rel_error, skipped)
    max_rel_error: float

    @property
    def n_checked(self):
        return sum(1 for p in self.probes if not p[5])

    @property
    def n_skipped(self):
        return sum(1 for p in self.probes if p[5])

    def to_text(self) -> str:
        lines = ["probe,name,index,analytic,numeric,rel_error"]
        for i, (name, idx, a, n, err, skipped) in enumerate(self.probes):
            tag = "skipped(kink)" if skipped else f"{err:.3e}"
            lines.append(f"{i},{name},{idx},{a:.10e},{n:.10e},{tag}")
        lines.append(f"max_rel_error,{self.max_rel_error:.3e}")
        return "\n".join(lines)


def _disagree(a, b, roundoff):
    return abs(a - b) > 0.1 * max(abs(a), abs(b)) + roundoff


def grad_check(loss_fn, parameters: dict, n_probes: int = 50, seed: int = 0, step: float = 1e-4,
               kink_tol: float = 1e-6, abs_floor: float = 1e-9) -> GradCheckReport:
    """Compare reverse-mode gradients against finite differences.

    ``loss_fn(params)`` must accept a dict of arrays or of ``Node`` leaves and
    return a scalar.  The numeric slope uses the five-point stencil, whose
    O(step^4) truncation allows a large step and so keeps float64 roundoff
    small even for gradients near 1e-8.  A probe that misses by more than
    ``kink_tol`` and whose stencil straddles a kink (ReLU, clip, the asymmetric hinge)
    is flagged and skipped.  ``abs_floor`` bounds the denominator of the
    relative error so that near-zero gradients are judged on an absolute
    scale.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in parameters.items()}
    leaves = {k: ad.leaf(v) for k, v in params.items()}
    out = loss_fn(leaves)
    if not np.isfinite(ad.value_of(out)):
        raise NumericError("loss is not finite at the probe point")
    if isinstance(out, ad.Node):
        out.backward()
    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names], dtype=float)
    f0 = float(ad.value_of(loss_fn(params)))
    probes, worst = [], 0.0
    for _ in range(n_probes):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = int(rng.integers(params[name].size))
        idx = np.unravel_index(flat, params[name].shape)
        g = leaves[name].grad
        analytic = float(g[idx]) if g is not None else 0.0
        orig = params[name][idx]
        f = {}
        for k in (-2, -1, 1, 2):
            params[name][idx] = orig + k * step
            f[k] = float(ad.value_of(loss_fn(params)))
        params[name][idx] = orig
        if not all(np.isfinite(v) for v in f.values()):
            raise NumericError(f"non-finite loss while probing {name}{idx}")
        numeric = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * step)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
        # On a smooth loss the curvature seen at two stencil widths, and on the
        # two sides of the probe, agrees to O(step).  A slope jump inside the
        # stencil breaks the first pair, a curvature jump (squared hinge) the
        # second.
        roundoff = 40 * np.finfo(np.float64).eps * max(abs(v) for v in (f0, *f.values())) / step ** 2
        c1 = (f[1] - 2 * f0 + f[-1]) / step ** 2
        c2 = (f[2] - 2 * f0 + f[-2]) / (4 * step ** 2)
        c_left = (f0 - 2 * f[-1] + f[-2]) / step ** 2
        c_right = (f[2] - 2 * f[1] + f0) / step ** 2
        kink = err > kink_tol and (_disagree(c1, c2, roundoff) or _disagree(c_left, c_right, roundoff))
        if not kink:
            worst = max(worst, err)
        probes.append((name, tuple(int(i) for i in idx), analytic, numeric, err, kink))
    return GradCheckReport(probes, worst)
