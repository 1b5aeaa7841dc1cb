"""Unet-GRU models: layer specs, builders, batch/streaming forward, weight files.

A model is a flat list of layer specs interpreted in order.  Inputs and
outputs are ``(T, channels, bands)``; internally activations are kept
channels-last, ``(T, bands, channels)``.  The frame axis doubles as the batch
axis because every kernel spans a single frame (time kernel 1), so only the
GRU layers carry information across frames.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import FormatError, InvalidInputError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MAGIC = b"MSE2"
FORMAT_VERSION = 1


@dataclass
class ModelGraph:
    layers: list
    weights: dict
    buffers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    state: dict | None = None

    def reset_state(self):
        """Zero every GRU hidden vector; required before ``forward_frame``."""
        dtype = self.dtype
        self.state = {spec["name"]: np.zeros(spec["units"], dtype=dtype)
                      for spec in self.layers if spec["kind"] == "gru"}

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype if self.weights else np.dtype(np.float32)

    def astype(self, dtype) -> "ModelGraph":
        return ModelGraph(
            [dict(s) for s in self.layers],
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            dict(self.meta),
        )

    def copy(self) -> "ModelGraph":
        return self.astype(self.dtype)

    def digest(self) -> str:
        """SHA-256 over every weight and buffer, for bitwise identity checks."""
        h = hashlib.sha256()
        for group in (self.weights, self.buffers):
            for k in sorted(group):
                h.update(k.encode())
                h.update(np.ascontiguousarray(group[k]).tobytes())
        return h.hexdigest()


def count_params(model: ModelGraph) -> int:
    return int(sum(w.size for w in model.weights.values()))


# builders

def _unet_gru_specs(in_channels, in_bands, enc_channels, gru_units, dec_mid, out_channels,
                    out_activation, bottleneck_shape):
    layers = []
    c, f = in_channels, in_bands
    skips = []
    for i, ch in enumerate(enc_channels, start=1):
        layers += [
            {"kind": "conv", "name": f"enc{i}.conv1", "in": c, "out": ch, "stride": 1, "kernel": [1, 3]},
            {"kind": "activation", "fn": "relu"},
            {"kind": "conv", "name": f"enc{i}.conv2", "in": ch, "out": ch, "stride": 2, "kernel": [1, 3]},
            {"kind": "batchnorm", "name": f"enc{i}.bn", "channels": ch},
            {"kind": "activation", "fn": "relu", "save": f"enc{i}"},
        ]
        c, f = ch, f // 2
        skips.append((f"enc{i}", ch))

    layers.append({"kind": "reshape", "to": "flat"})
    width = c * f
    for j, units in enumerate(gru_units, start=1):
        layers.append({"kind": "gru", "name": f"gru{j}", "in": width, "units": units})
        width = units
    bc, bf = bottleneck_shape
    if bc * bf != width or bf != f:
        raise ValueError("bottleneck reshape does not match the encoder output")
    layers.append({"kind": "reshape", "to": [bc, bf]})
    c = bc

    for i, mid in zip(range(len(enc_channels), 0, -1), dec_mid):
        name, skip_ch = skips[i - 1]
        out_ch = enc_channels[i - 2] if i > 1 else enc_channels[0]
        layers += [
            {"kind": "concat-skip", "from": name},
            {"kind": "tconv", "name": f"dec{i}.tconv1", "in": c + skip_ch, "out": mid, "stride": 1, "kernel": [1, 3]},
            {"kind": "activation", "fn": "relu"},
            {"kind": "tconv", "name": f"dec{i}.tconv2", "in": mid, "out": out_ch, "stride": 2, "kernel": [1, 3]},
            {"kind": "batchnorm", "name": f"dec{i}.bn", "channels": out_ch},
            {"kind": "activation", "fn": "relu"},
        ]
        c = out_ch
    layers += [
        {"kind": "conv", "name": "head", "in": c, "out": out_channels, "stride": 1, "kernel": [1, 3]},
        {"kind": "activation", "fn": out_activation},
    ]
    return layers


def init_weights(layers, seed, dtype=np.float32):
    """Uniform +-sqrt(1/fan_in) from a seeded PCG64 stream, in layer order."""
    rng = np.random.default_rng(seed)
    weights, buffers = {}, {}

    def uniform(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    for spec in layers:
        kind, name = spec["kind"], spec.get("name")
        if kind in ("conv", "tconv"):
            fan_in = spec["in"] * 3
            weights[f"{name}.w"] = uniform((spec["out"], spec["in"], 3), fan_in)
            weights[f"{name}.b"] = uniform((spec["out"],), fan_in)
        elif kind == "batchnorm":
            ch = spec["channels"]
            weights[f"{name}.gamma"] = np.ones(ch, dtype=dtype)
            weights[f"{name}.beta"] = np.zeros(ch, dtype=dtype)
            buffers[f"{name}.running_mean"] = np.zeros(ch, dtype=dtype)
            buffers[f"{name}.running_var"] = np.ones(ch, dtype=dtype)
        elif kind == "gru":
            i, h = spec["in"], spec["units"]
            weights[f"{name}.w_in"] = uniform((i, 3 * h), i)
            weights[f"{name}.w_hid"] = uniform((h, 3 * h), h)
            weights[f"{name}.b_in"] = np.zeros(3 * h, dtype=dtype)
            weights[f"{name}.b_hid"] = np.zeros(3 * h, dtype=dtype)
    return weights, buffers


def build_stage1(seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Mel masking network: 64 log-Mel bands in, 64 sigmoid gains out (~300k params)."""
    layers = _unet_gru_specs(
        in_channels=1, in_bands=64, enc_channels=[8, 16, 32, 64, 128], gru_units=[64, 64],
        dec_mid=[128, 64, 32, 16, 8], out_channels=1, out_activation="sigmoid",
        bottleneck_shape=(32, 2))
    weights, buffers = init_weights(layers, seed, dtype)
    return ModelGraph(layers, weights, buffers, {"stage": 1, "in_bands": 64, "in_channels": 1,
                                                 "out_channels": 1})


def build_stage2(seed: int = 0, dtype=np.float32, wide: bool = False) -> ModelGraph:
    """Complex mapping network: 4 x 512 input, 2 x 512 (real, imag) output (~260k params).

    ``wide=True`` gives the larger single-stage complex variant.
    """
    enc = [16, 32, 64]
    gru = [44, 64] if wide else [16, 64]
    layers = _unet_gru_specs(
        in_channels=4, in_bands=512, enc_channels=enc, gru_units=gru,
        dec_mid=[enc[1], enc[0], enc[0]], out_channels=2, out_activation="linear",
        bottleneck_shape=(1, 64))
    weights, buffers = init_weights(layers, seed, dtype)
    return ModelGraph(layers, weights, buffers, {"stage": 2, "in_bands": 512, "in_channels": 4,
                                                 "out_channels": 2, "wide": wide})


# forward

def _batchnorm(x, gamma, beta, mean, var):
    scale = ad.div(gamma, ad.sqrt(ad.add(var, BN_EPS)))
    shift = ad.sub(beta, ad.mul(mean, scale))
    return ad.add(ad.mul(x, scale), shift)


def run(model: ModelGraph, x, params=None, h0=None, training=False):
    """Forward over a whole sequence.

    ``x`` is ``(T, in_channels, in_bands)`` (stage 1 also accepts ``(T, 64)``).
    ``params`` maps weight names to ``Node`` leaves to record a tape; ``h0``
    maps GRU names to initial hidden vectors (zeros when omitted).  With
    ``training=True`` batch norm uses batch statistics and updates the
    running buffers in place.  Returns ``(output, final_hidden)``.
    """
    p = params if params is not None else model.weights
    xv = ad.value_of(x)
    if xv.ndim == 2:
        x = ad.reshape(x, (xv.shape[0], xv.shape[1], 1))
    else:
        x = ad.transpose(x, (0, 2, 1))
    n_frames = xv.shape[0]
    saved, final_h = {}, {}
    for spec in model.layers:
        kind = spec["kind"]
        if kind == "conv":
            x = ad.conv_freq(x, p[spec["name"] + ".w"], p[spec["name"] + ".b"], spec["stride"])
        elif kind == "tconv":
            if spec["stride"] == 2:
                x = ad.upsample_freq(x)
            x = ad.conv_freq(x, p[spec["name"] + ".w"], p[spec["name"] + ".b"], 1)
        elif kind == "batchnorm":
            name = spec["name"]
            gamma, beta = p[name + ".gamma"], p[name + ".beta"]
            if training:
                mu = ad.mean(x, axis=(0, 1))
                centered = ad.sub(x, mu)
                var = ad.mean(ad.mul(centered, centered), axis=(0, 1))
                rm, rv = model.buffers[name + ".running_mean"], model.buffers[name + ".running_var"]
                rm += BN_MOMENTUM * (ad.value_of(mu).astype(rm.dtype) - rm)
                rv += BN_MOMENTUM * (ad.value_of(var).astype(rv.dtype) - rv)
                x = _batchnorm(x, gamma, beta, mu, var)
            else:
                x = _batchnorm(x, gamma, beta, model.buffers[name + ".running_mean"],
                               model.buffers[name + ".running_var"])
        elif kind == "activation":
            fn = spec["fn"]
            if fn == "relu":
                x = ad.relu(x)
            elif fn == "sigmoid":
                x = ad.sigmoid(x)
            if "save" in spec:
                saved[spec["save"]] = x
        elif kind == "reshape":
            shape = (n_frames, -1) if spec["to"] == "flat" else (n_frames, spec["to"][1], spec["to"][0])
            x = ad.reshape(x, shape)
        elif kind == "gru":
            name = spec["name"]
            h = (h0 or {}).get(name)
            if h is None:
                h = np.zeros(spec["units"], dtype=model.dtype)
            x = ad.gru_sequence(x, h, p[name + ".w_in"], p[name + ".w_hid"],
                                p[name + ".b_in"], p[name + ".b_hid"])
            final_h[name] = ad.value_of(x)[-1].copy()
        elif kind == "concat-skip":
            x = ad.concat([x, saved[spec["from"]]], axis=2)
        else:
            raise FormatError(f"unknown layer kind {kind!r}")
    if model.meta.get("stage") == 1:
        return ad.reshape(x, (n_frames, -1)), final_h
    return ad.transpose(x, (0, 2, 1)), final_h


def _check_input(model, x, per_frame):
    meta = model.meta
    expected = (meta["in_channels"], meta["in_bands"])
    shape = np.shape(x)
    core = shape if per_frame else shape[1:]
    ok = core == expected or (meta["in_channels"] == 1 and core == expected[1:])
    if not ok:
        raise InvalidInputError(f"expected frame shape {expected}, got {core}")


def forward(model: ModelGraph, frames) -> np.ndarray:
    """Inference over ``T`` frames from a zero GRU state (does not touch ``model.state``)."""
    frames = np.asarray(frames, dtype=model.dtype)
    _check_input(model, frames, per_frame=False)
    out, _ = run(model, frames)
    return out


def forward_frame(model: ModelGraph, frame) -> np.ndarray:
    """Advance the streaming state by one frame and return that frame's output."""
    if model.state is None:
        raise StateError("model state not initialised; call reset_state() first")
    frame = np.asarray(frame, dtype=model.dtype)
    _check_input(model, frame, per_frame=True)
    out, final_h = run(model, frame[None], h0=model.state)
    model.state = final_h
    return out[0]


# weight file

def save_weights(model: ModelGraph, path) -> None:
    """``MSE2`` | u16 version | u32 len + JSON spec | u32 count | tensor records."""
    header = json.dumps({"layers": model.layers, "meta": model.meta}, sort_keys=True).encode()
    tensors = list(model.weights.items()) + [("buffer:" + k, v) for k, v in model.buffers.items()]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated weight file while reading {what}", self.pos)
        chunk = self.data[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path) -> ModelGraph:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an MSE2 weight file", 0)
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported weight file version {version}", 4)
    (hlen,) = r.unpack("<I", "header length")
    start = r.pos
    try:
        header = json.loads(r.take(hlen, "layer table").decode("utf-8"))
        layers, meta = header["layers"], header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt layer table: {exc}", start) from exc
    (count,) = r.unpack("<I", "tensor count")
    weights, buffers = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="strict")
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n, f"tensor {name}"), dtype="<f4").reshape(dims).astype(np.float32)
        if name.startswith("buffer:"):
            buffers[name[len("buffer:"):]] = arr
        else:
            weights[name] = arr
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    expected, _ = init_weights(layers, 0)
    if set(expected) != set(weights) or any(expected[k].shape != weights[k].shape for k in expected):
        raise FormatError("tensor set does not match the layer table")
    return ModelGraph(layers, weights, buffers, meta)
