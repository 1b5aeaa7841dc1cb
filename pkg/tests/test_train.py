import csv

import numpy as np
import pytest

from melmask2 import nn, train
from melmask2.errors import InvalidConfigError, NumericError, TrainingError
from melmask2.evalbench import mix_at_snr, si_sdr
from melmask2.pipeline import Enhancer, PipelineConfig
from melmask2.signal import SAMPLE_RATE


def smoothed(curve, n=20):
    return np.convolve(curve, np.ones(n) / n, "valid")


def test_dataset_shape_and_determinism():
    a, b = train.synth_toy_dataset(8, 2.0, 3), train.synth_toy_dataset(8, 2.0, 3)
    assert len(a) == 8
    for (c1, n1), (c2, n2) in zip(a.pairs, b.pairs):
        assert len(c1) == len(n1) == 64000
        np.testing.assert_array_equal(c1.samples, c2.samples)
        np.testing.assert_array_equal(n1.samples, n2.samples)
        assert np.mean(n1.samples ** 2) > 0
    other = train.synth_toy_dataset(8, 2.0, 4)
    assert not np.array_equal(a.pairs[0][0].samples, other.pairs[0][0].samples)
    with pytest.raises(InvalidConfigError):
        train.synth_toy_dataset(0)


def test_clean_energy_mostly_below_8k():
    for clean, _ in train.synth_toy_dataset(8, 1.0, 1).pairs:
        spec = np.abs(np.fft.rfft(clean.samples)) ** 2
        freqs = np.fft.rfftfreq(len(clean), 1 / SAMPLE_RATE)
        assert spec[freqs < 8000].sum() / spec.sum() > 0.8


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    opt = train.Adam(1e-2)
    opt.step(p, {"w": np.array([0.3, 0.3])})
    m_before = opt.m["w"].copy()
    w_before = p["w"].copy()
    train.adam_step(p, {"w": np.zeros(2)}, opt)
    # bias-corrected first moment stays nonzero, so compare moments not weights
    np.testing.assert_allclose(opt.m["w"], 0.9 * m_before)
    fresh = {"w": w_before.copy()}
    train.Adam(1e-2).step(fresh, {"w": np.zeros(2)})
    np.testing.assert_array_equal(fresh["w"], w_before)


def test_adam_constant_gradient_steps_tend_to_lr():
    p = {"w": np.zeros(3)}
    opt = train.Adam(1e-3)
    g = np.array([0.5, -4.0, 1e-3])
    for _ in range(500):
        before = p["w"].copy()
        opt.step(p, {"w": g})
    np.testing.assert_allclose(p["w"] - before, -1e-3 * np.sign(g), rtol=1e-3)


def test_adam_rejects_non_finite():
    p = {"w": np.ones(2)}
    with pytest.raises(NumericError):
        train.Adam().step(p, {"w": np.array([np.nan, 0.0])})
    np.testing.assert_array_equal(p["w"], 1.0)
    with pytest.raises(InvalidConfigError):
        train.Adam(0.0)


def test_adam_deterministic():
    def run():
        p = {"w": np.zeros(4)}
        opt = train.Adam()
        rng = np.random.default_rng(0)
        for _ in range(20):
            opt.step(p, {"w": rng.normal(size=4)})
        return p["w"]
    np.testing.assert_array_equal(run(), run())


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        train.TrainConfig(learning_rate=-1.0)
    with pytest.raises(InvalidConfigError):
        train.TrainConfig(steps_per_phase=-1)


def test_zero_steps_leave_model_unchanged():
    data = train.synth_toy_dataset(1, 0.5, 0)
    m = nn.build_stage1(0)
    before = m.digest()
    _, curve = train.train_stage1(m, data, "Lg", train.TrainConfig(steps_per_phase=0))
    assert curve == [] and m.digest() == before


def test_unknown_loss_rejected():
    data = train.synth_toy_dataset(1, 0.5, 0)
    with pytest.raises(InvalidConfigError):
        train.train_stage1(nn.build_stage1(0), data, "L7", train.TrainConfig(steps_per_phase=1))


def test_lg_loss_falls_by_a_fifth(lg_stage1):
    s = smoothed(lg_stage1[1])
    assert len(lg_stage1[1]) == 200
    assert s[-1] < 0.8 * s[0]


def test_stage2_loss_falls_and_stage1_frozen(trained_two_stage):
    s1, _, curve, before = trained_two_stage
    s = smoothed(curve)
    assert s[-1] < 0.8 * s[0]
    assert s1.digest() == before


def test_l1_training_improves_zero_db_mixture():
    data = train.synth_toy_dataset(4, 2.0, 0)
    m = nn.build_stage1(0)
    train.train_stage1(m, data, "L1", train.TrainConfig(steps_per_phase=100, batch_frames=32))
    enh = Enhancer(PipelineConfig(mode="stage1_only"), m)
    gains = []
    for clean, noise in data.pairs:
        noisy = mix_at_snr(clean, noise, 0.0)
        gains.append(si_sdr(clean, enh.enhance(noisy)) - si_sdr(clean, noisy))
    assert np.mean(gains) > 0


def test_channel_order_matters(lg_stage1, toy_eval_set):
    cfg = train.TrainConfig(steps_per_phase=1, batch_frames=16)
    losses = []
    for order in [(0, 1, 2, 3), (2, 3, 0, 1)]:
        s2 = nn.build_stage2(1)
        _, curve = train.train_stage2(s2, lg_stage1[0].copy(), toy_eval_set, cfg, channel_order=order)
        losses.append(curve[0])
    assert losses[0] != losses[1]


def test_divergence_reports_step(monkeypatch):
    data = train.synth_toy_dataset(1, 0.5, 0)
    calls = {"n": 0}
    real = train.stage1_loss

    def flaky(*args):
        calls["n"] += 1
        out = real(*args)
        return out * np.nan if calls["n"] == 3 else out
    monkeypatch.setattr(train, "stage1_loss", flaky)
    with pytest.raises(TrainingError) as info:
        train.train_stage1(nn.build_stage1(0), data, "Lg", train.TrainConfig(steps_per_phase=5, batch_frames=8))
    assert info.value.step == 2


@pytest.mark.parametrize("scheme,phases", [
    ("joint", ["joint"]),
    ("s1Lg_s2", ["stage1_Lg", "stage2"]),
    ("s1L1_joint", ["stage1_L1", "joint"]),
    ("s1Lg_s2_joint", ["stage1_Lg", "stage2", "joint"]),
])
def test_scheme_phases(scheme, phases):
    assert train.scheme_phases(scheme) == phases


def test_seven_schemes():
    assert len(train.SCHEMES) == 7 and len(set(train.SCHEMES)) == 7
    with pytest.raises(InvalidConfigError):
        train.scheme_phases("s2_first")


def test_tiny_scheme_run_is_deterministic_and_reports(tmp_path):
    data = train.synth_toy_dataset(2, 0.5, 0)
    cfg = train.TrainConfig(steps_per_phase=2, batch_frames=8)
    a = train.run_scheme("s1L1_s2_joint", data, cfg, eval_snrs=(0.0,))
    b = train.run_scheme("s1L1_s2_joint", data, cfg, eval_snrs=(0.0,))
    assert [d[1:] for d in a.digests] == [d[1:] for d in b.digests]
    assert [p for p, _ in a.curves] == ["stage1_L1", "stage2", "joint"]
    # the frozen stage-2 phase leaves stage 1 alone; stage-1 phase leaves stage 2 alone
    assert a.digests[2][1] == a.digests[1][1]
    assert a.digests[1][2] == a.digests[0][2]
    assert a.digests[3][1] != a.digests[2][1]
    train.write_curves_csv(tmp_path / "c.csv", [a])
    train.write_summary_csv(tmp_path / "s.csv", [b, a])
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["scheme", "phase", "step", "loss"] and len(rows) == 7
    assert list(csv.reader(open(tmp_path / "s.csv")))[0] == ["scheme", "final_sisdr_db"]
    p1, p2 = train.save_checkpoint(a, tmp_path / "ck")
    assert nn.load_weights(p1).digest() == a.stage1.digest()
    assert nn.load_weights(p2).meta["stage"] == 2
