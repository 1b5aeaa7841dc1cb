import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from melmask2.errors import InvalidInputError
from melmask2.evalbench import (PROTOCOL_SNRS, EvalRow, ci95, evaluate, mix_at_snr, noise_scale, power,
                                si_sdr, summarize, write_summary_csv)
from melmask2.pipeline import Enhancer, PipelineConfig
from melmask2.signal import AudioBuffer


def equal_power_pair(rng, n=4000):
    s, nz = rng.normal(size=n), rng.normal(size=n)
    return AudioBuffer(s), AudioBuffer(nz * np.sqrt(power(s) / power(nz)))


def test_alpha_closed_forms(rng):
    s, n = equal_power_pair(rng)
    assert noise_scale(s, n, 0.0) == pytest.approx(1.0)
    # oracle: sqrt(1 / 10)
    assert noise_scale(s, n, 10.0) == pytest.approx(10 ** -0.5)
    assert noise_scale(s, n, 10.0) == pytest.approx(0.31623, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.floats(-20, 40), st.integers(0, 1000))
def test_mix_hits_target_snr(snr, seed):
    rng = np.random.default_rng(seed)
    s, n = AudioBuffer(rng.normal(size=1000)), AudioBuffer(3 * rng.normal(size=1000))
    mixed = mix_at_snr(s, n, snr)
    achieved = 10 * np.log10(power(s) / power(mixed.samples - s.samples))
    assert achieved == pytest.approx(snr, abs=1e-6)


def test_mix_errors():
    with pytest.raises(InvalidInputError):
        mix_at_snr(AudioBuffer(np.ones(10)), AudioBuffer(np.zeros(10)), 0.0)
    with pytest.raises(InvalidInputError):
        mix_at_snr(AudioBuffer(np.ones(10)), AudioBuffer(np.ones(11)), 0.0)


def test_si_sdr_examples(rng):
    assert si_sdr(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(0.0, abs=1e-12)
    s = rng.normal(size=100)
    assert si_sdr(s, s) == 60.0
    assert si_sdr(s, 3 * s) == 60.0
    with pytest.raises(InvalidInputError):
        si_sdr(np.zeros(4), np.ones(4))


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_si_sdr_scale_invariant(a):
    rng = np.random.default_rng(5)
    s = rng.normal(size=500)
    e = s + rng.normal(size=500)
    assert si_sdr(s, a * e) == pytest.approx(si_sdr(s, e), abs=1e-9)


def test_row_needs_label():
    with pytest.raises(InvalidInputError):
        EvalRow(0.0, 1.0, 2.0, "")


class Passthrough:
    def enhance(self, audio):
        return audio


def test_row_count_matches_protocol(rng):
    pairs = [(AudioBuffer(rng.normal(size=64)), AudioBuffer(rng.normal(size=64))) for _ in range(100)]
    rows = evaluate(Passthrough(), pairs, PROTOCOL_SNRS, label="id")
    assert len(PROTOCOL_SNRS) == 8 and len(rows) == 800
    assert all(r.sisdr_out == r.sisdr_in for r in rows)


def test_ci_halves_when_n_quadruples():
    rng = np.random.default_rng(0)
    small = np.mean([ci95(rng.normal(size=100)) for _ in range(200)])
    big = np.mean([ci95(rng.normal(size=400)) for _ in range(200)])
    assert small / big == pytest.approx(2.0, rel=0.05)
    assert ci95([3.0]) == 0.0


def identity_enhancer():
    from melmask2 import nn
    m = nn.build_stage1(0)
    m.weights["head.w"][:] = 0.0
    m.weights["head.b"][:] = 60.0
    return Enhancer(PipelineConfig(mode="stage1_only"), m)


def test_identity_pipeline_keeps_score(toy_pair):
    rows = evaluate(identity_enhancer(), [toy_pair], [0, 10])
    for r in rows:
        assert r.sisdr_out == pytest.approx(r.sisdr_in, abs=0.05)
    assert rows[0].label == "stage1_only"


def test_parallel_matches_serial(toy_pair):
    enh = identity_enhancer()
    a = evaluate(enh, [toy_pair], [0, 5], jobs=1)
    b = evaluate(enh, [toy_pair], [0, 5], jobs=2)
    assert [(r.sisdr_in, r.sisdr_out) for r in a] == [(r.sisdr_in, r.sisdr_out) for r in b]


def test_evaluate_rejects_empty(toy_pair):
    with pytest.raises(InvalidInputError):
        evaluate(Passthrough(), [], [0])
    with pytest.raises(InvalidInputError):
        evaluate(Passthrough(), [toy_pair], [])


def test_summary_and_csv(tmp_path):
    rows = [EvalRow(0.0, 1.0, v, "a") for v in (2.0, 4.0)] + [EvalRow(5.0, 6.0, 7.0, "a")]
    summ = summarize(rows)
    assert [(s.snr_db, s.n) for s in summ] == [(0.0, 2), (5.0, 1)]
    assert summ[0].sisdr_out_mean == 3.0
    assert summ[0].ci95 == pytest.approx(1.96 * np.std([2.0, 4.0], ddof=1) / np.sqrt(2))
    write_summary_csv(tmp_path / "s.csv", summ)
    lines = list(csv.reader(open(tmp_path / "s.csv")))
    assert lines[0] == ["condition", "snr_db", "n", "sisdr_in_mean", "sisdr_out_mean", "ci95"]
    assert lines[1][:3] == ["a", "0", "2"]
