"""A small tape-based reverse-mode differentiator over numpy arrays.

Every op accepts plain arrays or :class:`Node` objects.  When none of the
inputs is a ``Node`` the op returns a plain array and records nothing, so
the same model code serves inference (no tape) and training (tape).

Heavy layers (frequency convolution, GRU over a sequence, STFT/iSTFT) are
fused primitives with hand-written vector-Jacobian products; everything else
is composed from elementwise ops.
"""

from __future__ import annotations

import numpy as np

from .signal import StftConfig, make_hann, synthesis_window


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=True):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if isinstance(p, Node) and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if not isinstance(p, Node) or gp is None:
                    continue
                grads[id(p)] = gp if id(p) not in grads else grads[id(p)] + gp

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)


def leaf(value) -> Node:
    return Node(np.asarray(value))


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x)


def _wrap(out, parents, vjp):
    if any(isinstance(p, Node) for p in parents):
        return Node(out, parents, vjp)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _wrap(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _wrap(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _wrap(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _wrap(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _wrap(av @ bv, (a, b), vjp)


def power(x, c, floor=None):
    """``x ** c``; with ``floor`` the derivative uses ``max(x, floor)``."""
    xv = value_of(x)
    out = xv ** c

    def vjp(g):
        base = xv if floor is None else np.maximum(xv, floor)
        return (g * c * base ** (c - 1),)

    return _wrap(out, (x,), vjp)


def exp(x):
    out = np.exp(value_of(x))
    return _wrap(out, (x,), lambda g: (g * out,))


def log(x):
    xv = value_of(x)
    return _wrap(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x):
    out = np.sqrt(value_of(x))
    return _wrap(out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid(x):
    xv = value_of(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _wrap(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(value_of(x))
    return _wrap(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x):
    """max(x, 0); the subgradient at 0 is 0."""
    xv = value_of(x)
    mask = xv > 0
    return _wrap(np.maximum(xv, 0), (x,), lambda g: (g * mask,))


def clip(x, lo, hi):
    xv = value_of(x)
    inside = (xv >= lo) & (xv <= hi)
    return _wrap(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


def sin(x):
    xv = value_of(x)
    return _wrap(np.sin(xv), (x,), lambda g: (g * np.cos(xv),))


def cos(x):
    xv = value_of(x)
    return _wrap(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),))


# reductions and shape ops

def sum(x, axis=None, keepdims=False):
    xv = value_of(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _wrap(np.sum(xv, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    xv = value_of(x)
    return _wrap(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes):
    xv = value_of(x)
    inverse = np.argsort(axes)
    return _wrap(np.transpose(xv, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, idx):
    xv = value_of(x)

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        out = np.zeros_like(xv)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _wrap(xv[idx], (x,), vjp)


def concat(xs, axis):
    vals = [value_of(x) for x in xs]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(vals)))

    return _wrap(np.concatenate(vals, axis=axis), tuple(xs), vjp)


# fused layers

def _rowwise_dot(a, b):
    """``a @ b`` whose rows do not depend on how many rows are stacked.

    BLAS picks its blocking from the matrix shape, so the same frame can round
    differently in a T-frame batch and alone.  In double precision (the
    checking precision) an unblocked einsum keeps batch and per-frame results
    bit-identical; single precision keeps the fast BLAS path.
    """
    if a.dtype == np.float64 and b.dtype == np.float64:
        return np.einsum("ij,jk->ik", a, b)
    return a @ b


def _im2col(xv, stride):
    """(N, F, C) -> (N, F_out, 3C) patches for a kernel-3, pad-1 filter."""
    n, f, c = xv.shape
    xp = np.pad(xv, ((0, 0), (1, 1), (0, 0)))
    f_out = (f - 1) // stride + 1
    span = stride * (f_out - 1) + 1
    return np.concatenate([xp[:, k: k + span: stride] for k in range(3)], axis=2)


def conv_freq(x, w, b, stride=1):
    """Frequency-axis convolution, kernel 3, zero pad 1, channels last.

    ``x``: (N, F, C), ``w``: (O, C, 3), ``b``: (O,) -> (N, F_out, O).  ``N``
    is the frame axis; the time kernel is 1 so frames never mix.
    """
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    n, f, c = xv.shape
    o = wv.shape[0]
    cols = _im2col(xv, stride)
    f_out = cols.shape[1]
    wmat = wv.transpose(2, 1, 0).reshape(3 * c, o)
    out = _rowwise_dot(cols.reshape(-1, 3 * c), wmat) + bv

    def vjp(g):
        g2 = g.reshape(-1, o)
        gw = (cols.reshape(-1, 3 * c).T @ g2).reshape(3, c, o).transpose(2, 1, 0)
        if not isinstance(x, Node):
            return None, gw, g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(n, f_out, 3, c)
        gxp = np.zeros((n, f + 2, c), dtype=gcols.dtype)
        span = stride * (f_out - 1) + 1
        for k in range(3):
            gxp[:, k: k + span: stride] += gcols[:, :, k]
        return gxp[:, 1:-1], gw, g2.sum(axis=0)

    return _wrap(out.reshape(n, f_out, o), (x, w, b), vjp)


def upsample_freq(x):
    """Zero insertion along frequency: (N, F, C) -> (N, 2F, C)."""
    xv = value_of(x)
    out = np.zeros((xv.shape[0], 2 * xv.shape[1], xv.shape[2]), dtype=xv.dtype)
    out[:, ::2] = xv
    return _wrap(out, (x,), lambda g: (g[:, ::2],))


def gru_sequence(x, h0, w_in, w_hid, b_in, b_hid):
    """GRU over the leading (time) axis.

    ``x``: (T, I), ``h0``: (H,), ``w_in``: (I, 3H), ``w_hid``: (H, 3H), gate
    order (reset, update, candidate).  Returns (T, H) hidden states.
    """
    xv, h0v = value_of(x), value_of(h0)
    wi, wh, bi, bh = value_of(w_in), value_of(w_hid), value_of(b_in), value_of(b_hid)
    steps = xv.shape[0]
    hdim = wh.shape[0]
    xi = _rowwise_dot(xv, wi) + bi
    hs = np.empty((steps, hdim), dtype=np.result_type(xi, h0v))
    r_all, z_all, n_all, hn_all = (np.empty_like(hs) for _ in range(4))
    h = h0v
    for t in range(steps):
        hh = h @ wh + bh
        r = 0.5 * (1.0 + np.tanh(0.5 * (xi[t, :hdim] + hh[:hdim])))
        z = 0.5 * (1.0 + np.tanh(0.5 * (xi[t, hdim:2 * hdim] + hh[hdim:2 * hdim])))
        n = np.tanh(xi[t, 2 * hdim:] + r * hh[2 * hdim:])
        h = (1.0 - z) * n + z * h
        hs[t], r_all[t], z_all[t], n_all[t], hn_all[t] = h, r, z, n, hh[2 * hdim:]

    def vjp(g):
        gxi = np.empty_like(xi)
        ghh = np.empty((steps, 3 * hdim), dtype=xi.dtype)
        dh = np.zeros(hdim, dtype=xi.dtype)
        for t in range(steps - 1, -1, -1):
            dh = dh + g[t]
            h_prev = hs[t - 1] if t > 0 else h0v
            r, z, n = r_all[t], z_all[t], n_all[t]
            dn_pre = dh * (1.0 - z) * (1.0 - n * n)
            dz_pre = dh * (h_prev - n) * z * (1.0 - z)
            dr_pre = dn_pre * hn_all[t] * r * (1.0 - r)
            gxi[t, :hdim], gxi[t, hdim:2 * hdim], gxi[t, 2 * hdim:] = dr_pre, dz_pre, dn_pre
            ghh[t, :hdim], ghh[t, hdim:2 * hdim], ghh[t, 2 * hdim:] = dr_pre, dz_pre, dn_pre * r
            dh = dh * z + ghh[t] @ wh.T
        h_prevs = np.vstack([h0v[None, :], hs[:-1]])
        return (gxi @ wi.T, dh, xv.T @ gxi, h_prevs.T @ ghh, gxi.sum(axis=0), ghh.sum(axis=0))

    return _wrap(hs, (x, h0, w_in, w_hid, b_in, b_hid), vjp)


# differentiable STFT pair on real/imag stacks

def stft_frames(x, cfg: StftConfig):
    """Signal (L,) -> (2, T, n_rfft) stack of real and imaginary parts."""
    xv = value_of(x)
    win = make_hann(cfg.window_len)
    n_frames = cfg.n_frames(xv.shape[0])
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(xv[idx] * win, n=cfg.fft_size, axis=-1)
    out = np.stack([spec.real, spec.imag]).astype(xv.dtype, copy=False)

    def vjp(g):
        # adjoint of rfft restricted to the first window_len samples
        full = np.zeros((n_frames, cfg.fft_size), dtype=np.complex128)
        full[:, : cfg.n_rfft] = g[0] + 1j * g[1]
        frame_g = cfg.fft_size * np.fft.ifft(full, axis=-1).real[:, : cfg.window_len] * win
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, frame_g)
        return (gx,)

    return _wrap(out, (x,), vjp)


def istft_frames(spec, cfg: StftConfig):
    """(2, T, n_rfft) real/imag stack -> overlap-added signal."""
    sv = value_of(spec)
    n_frames = sv.shape[1]
    ws = synthesis_window(cfg)
    y = np.fft.irfft(sv[0] + 1j * sv[1], n=cfg.fft_size, axis=-1)[:, : cfg.window_len] * ws
    out = np.zeros(cfg.n_samples(n_frames), dtype=sv.dtype)
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    np.add.at(out, idx, y)

    def vjp(g):
        frame_g = np.zeros((n_frames, cfg.fft_size))
        frame_g[:, : cfg.window_len] = g[idx] * ws
        r = np.fft.rfft(frame_g, axis=-1)
        weight = np.full(cfg.n_rfft, 2.0 / cfg.fft_size)
        weight[0] = weight[-1] = 1.0 / cfg.fft_size
        gre = r.real * weight
        gim = r.imag * weight
        gim[:, 0] = 0.0
        gim[:, -1] = 0.0
        return (np.stack([gre, gim]).astype(sv.dtype, copy=False),)

    return _wrap(out, (spec,), vjp)
