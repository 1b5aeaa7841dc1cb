import hashlib

import numpy as np
import pytest

from melmask2 import autodiff as ad
from melmask2 import nn
from melmask2.errors import FormatError, InvalidInputError, StateError
from melmask2.losses import grad_check


def test_param_budgets():
    n1 = nn.count_params(nn.build_stage1(0))
    n2 = nn.count_params(nn.build_stage2(0))
    assert 255_000 <= n1 <= 345_000
    assert 221_000 <= n2 <= 299_000
    assert 476_000 <= n1 + n2 <= 644_000


def test_count_params_closed_forms():
    assert nn.count_params(nn.ModelGraph([], {})) == 0
    conv = nn.ModelGraph([{"kind": "conv", "name": "c", "in": 8, "out": 8, "stride": 1, "kernel": [1, 3]}], {})
    weights, _ = nn.init_weights(conv.layers, 0)
    assert nn.count_params(nn.ModelGraph(conv.layers, weights)) == 8 * 8 * 3 + 8


def test_kernels_are_one_by_three():
    for m in (nn.build_stage1(0), nn.build_stage2(0)):
        for spec in m.layers:
            if spec["kind"] in ("conv", "tconv"):
                assert spec["kernel"] == [1, 3]


def test_meta_contract():
    s1, s2 = nn.build_stage1(0), nn.build_stage2(0)
    assert (s1.meta["in_bands"], s1.meta["in_channels"]) == (64, 1)
    assert (s2.meta["in_bands"], s2.meta["in_channels"]) == (512, 4)


def test_same_seed_identical_weights():
    a, b = nn.build_stage1(5), nn.build_stage1(5)
    for k in a.weights:
        np.testing.assert_array_equal(a.weights[k], b.weights[k])
    assert any(not np.array_equal(a.weights[k], nn.build_stage1(6).weights[k]) for k in a.weights)


def test_init_bounds():
    m = nn.build_stage2(0)
    for spec in m.layers:
        if spec["kind"] == "gru":
            assert not np.any(m.weights[spec["name"] + ".b_in"])
            assert not np.any(m.weights[spec["name"] + ".b_hid"])
        if spec["kind"] == "conv":
            w = m.weights[spec["name"] + ".w"]
            assert np.abs(w).max() <= np.sqrt(1.0 / (spec["in"] * 3))


def test_stage1_zero_input_in_unit_interval(small_models):
    g = nn.forward(small_models[0], np.zeros((10, 64)))
    assert g.shape == (10, 64)
    assert np.all((g > 0) & (g < 1))


def test_stage2_zero_input_finite(small_models):
    out = nn.forward(small_models[1], np.zeros((3, 4, 512)))
    assert out.shape == (3, 2, 512)
    assert np.all(np.isfinite(out))


def test_forward_shape_checks(small_models):
    with pytest.raises(InvalidInputError):
        nn.forward(small_models[1], np.zeros((3, 2, 512)))


def test_forward_frame_needs_state():
    m = nn.build_stage1(0)
    with pytest.raises(StateError):
        nn.forward_frame(m, np.zeros(64))


@pytest.mark.parametrize("stage,dtype,tol", [(1, np.float64, 0.0), (2, np.float64, 0.0),
                                             (1, np.float32, 1e-5), (2, np.float32, 1e-5)])
def test_streaming_equals_batch(stage, dtype, tol, rng):
    m = (nn.build_stage1 if stage == 1 else nn.build_stage2)(1, dtype=dtype)
    shape = (50, 64) if stage == 1 else (50, 4, 512)
    x = rng.normal(size=shape).astype(dtype)
    batch = nn.forward(m, x)
    m.reset_state()
    stream = np.stack([nn.forward_frame(m, f) for f in x])
    scale = max(np.abs(batch).max(), 1.0)
    assert np.abs(stream - batch).max() <= tol * scale


def test_causality(rng):
    m = nn.build_stage2(2, dtype=np.float64)
    x = rng.normal(size=(12, 4, 512))
    y = x.copy()
    y[7:] = rng.normal(size=y[7:].shape)
    np.testing.assert_array_equal(nn.forward(m, x)[:7], nn.forward(m, y)[:7])


def test_reset_state_repeats(rng):
    m = nn.build_stage1(0)
    x = rng.normal(size=(4, 64)).astype(np.float32)
    m.reset_state()
    a = [nn.forward_frame(m, f) for f in x]
    m.reset_state()
    b = [nn.forward_frame(m, f) for f in x]
    np.testing.assert_array_equal(a, b)


def test_inference_batchnorm_leaves_running_stats(rng, small_models):
    m = small_models[0]
    before = {k: v.copy() for k, v in m.buffers.items()}
    nn.forward(m, rng.normal(size=(5, 64)))
    for k in before:
        np.testing.assert_array_equal(before[k], m.buffers[k])


def test_training_batchnorm_updates_running_stats(rng):
    m = nn.build_stage1(0)
    nn.run(m, rng.normal(size=(5, 64)).astype(np.float32), training=True)
    assert np.any(m.buffers["enc1.bn.running_mean"] != 0)


def test_network_gradients(rng):
    m = nn.build_stage1(3, dtype=np.float64)
    x = rng.normal(size=(4, 64))
    r = rng.normal(size=(4, 64))

    def f(p):
        out, _ = nn.run(m.copy(), x, params=p, training=True)
        return ad.mean(ad.mul(out, r))
    rep = grad_check(f, m.weights, n_probes=40, abs_floor=1e-6)
    assert rep.max_rel_error < 1e-4


def test_weight_round_trip(tmp_path):
    m = nn.build_stage2(9)
    m.buffers["enc1.bn.running_mean"][:] = 0.25
    nn.save_weights(m, tmp_path / "w.bin")
    back = nn.load_weights(tmp_path / "w.bin")
    assert back.layers == m.layers and back.meta == m.meta
    for k in m.weights:
        np.testing.assert_array_equal(back.weights[k], m.weights[k])
    np.testing.assert_array_equal(back.buffers["enc1.bn.running_mean"], 0.25)


def test_weight_file_layout(tmp_path):
    nn.save_weights(nn.build_stage1(0), tmp_path / "w.bin")
    data = (tmp_path / "w.bin").read_bytes()
    assert data[:4] == b"MSE2"
    assert int.from_bytes(data[4:6], "little") == 1


def test_weight_file_hash_stable(tmp_path):
    nn.save_weights(nn.build_stage1(11), tmp_path / "a.bin")
    nn.save_weights(nn.build_stage1(11), tmp_path / "b.bin")
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert digest(tmp_path / "a.bin") == digest(tmp_path / "b.bin")


@pytest.mark.parametrize("mutate,offset_min", [
    (lambda d: b"XXXX" + d[4:], 0),
    (lambda d: d[:4] + (7).to_bytes(2, "little") + d[6:], 4),
    (lambda d: d[: len(d) // 2], 10),
    (lambda d: d + b"\x00", 10),
])
def test_corrupt_weight_files(tmp_path, mutate, offset_min):
    nn.save_weights(nn.build_stage1(0), tmp_path / "w.bin")
    (tmp_path / "bad.bin").write_bytes(mutate((tmp_path / "w.bin").read_bytes()))
    with pytest.raises(FormatError) as info:
        nn.load_weights(tmp_path / "bad.bin")
    assert info.value.offset is None or info.value.offset >= offset_min
