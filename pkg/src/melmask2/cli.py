"""``melmask2`` command line: mix, enhance, oracle, train, eval, bench, gradcheck.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic on stderr),
2 usage error.  ``MELMASK2_LOG`` selects error, info or debug logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalbench as ev
from . import gradsuite, nn, oracle, pipeline, train
from .errors import MelMaskError
from .signal import AudioBuffer, wav_read, wav_write

log = logging.getLogger("melmask2")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def snr_list(text: str) -> list:
    """``start:stop:step`` (inclusive) or a comma list of numbers."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [start + i * step for i in range(n)]
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}; use start:stop:step or a,b,c") from None


def _bounded(kind, lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a valid {kind.__name__}: {text!r}") from None
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise argparse.ArgumentTypeError(f"{v} is below the allowed minimum {lo}")
        if hi is not None and v > hi:
            raise argparse.ArgumentTypeError(f"{v} is above the allowed maximum {hi}")
        return v
    return parse


positive_float = _bounded(float, 0.0, lo_open=True)
positive_int = _bounded(int, 1)
nonneg_int = _bounded(int, 0)


def on_off(text):
    if text.lower() in ("on", "true", "1", "yes"):
        return True
    if text.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def weight_list(text):
    return tuple(p for p in text.split(",") if p)


def _add_pipeline_flags(p, weights_required=False):
    p.add_argument("--mode", choices=pipeline.MODES, default="two_stage", help="pipeline configuration")
    p.add_argument("--postfilter", type=on_off, default=False, help="sine post-filter on|off (default off)")
    p.add_argument("--weights", type=weight_list, default=(), required=weights_required,
                   help="comma-separated weight files in stage order")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melmask2", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mix", help="mix speech and noise at a target SNR")
    p.add_argument("--speech", required=True, help="clean speech WAV")
    p.add_argument("--noise", required=True, help="noise WAV (trimmed or tiled to the speech length)")
    p.add_argument("--snr", type=float, required=True, help="target SNR in dB")
    p.add_argument("--out", required=True, help="output WAV")
    p.add_argument("--seed", type=nonneg_int, default=0, help="offset into tiled noise")

    p = sub.add_parser("enhance", help="enhance a WAV file through the streaming path")
    p.add_argument("--in", dest="inp", required=True, help="noisy input WAV (32 kHz)")
    p.add_argument("--out", required=True, help="enhanced output WAV")
    _add_pipeline_flags(p, weights_required=True)
    p.add_argument("--seed", type=nonneg_int, default=0, help="accepted for uniformity; enhancement is deterministic")

    p = sub.add_parser("oracle", help="oracle-inference SNR sweep to CSV")
    p.add_argument("--speech", help="clean speech WAV (default: synthetic toy clip)")
    p.add_argument("--noise", help="noise WAV (default: synthetic toy noise)")
    p.add_argument("--snrs", type=snr_list, default=list(ev.PROTOCOL_SNRS), help="start:stop:step inclusive")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--seed", type=nonneg_int, default=0, help="seed for the synthetic clip")

    p = sub.add_parser("train", help="run training schemes on the synthetic toy set")
    p.add_argument("--scheme", choices=train.SCHEMES + ("all",), default="all", help="scheme id or all")
    p.add_argument("--pairs", type=positive_int, default=8, help="toy clip pairs")
    p.add_argument("--duration", type=positive_float, default=2.0, help="toy clip length in seconds")
    p.add_argument("--steps", type=nonneg_int, default=200, help="steps per phase")
    p.add_argument("--batch-frames", type=positive_int, default=None, help="random crop length in frames")
    p.add_argument("--lr", type=positive_float, default=1e-3, help="Adam learning rate")
    p.add_argument("--p", type=positive_float, default=0.5, help="gain power factor for Lg")
    p.add_argument("--beta", type=positive_float, default=0.5, help="power compression factor")
    p.add_argument("--postfilter", type=on_off, default=False, help="post-filter inside the training graph")
    p.add_argument("--out-dir", required=True, help="directory for checkpoints and CSV reports")
    p.add_argument("--seed", type=nonneg_int, default=0, help="data and initialisation seed")

    p = sub.add_parser("eval", help="SI-SDR evaluation over pairs and SNRs")
    _add_pipeline_flags(p, weights_required=True)
    p.add_argument("--speech-dir", help="directory of clean WAVs (default: synthetic toy set)")
    p.add_argument("--noise-dir", help="directory of noise WAVs, paired in sorted order")
    p.add_argument("--pairs", type=positive_int, default=8, help="toy pairs when no directories are given")
    p.add_argument("--duration", type=positive_float, default=2.0, help="toy clip length in seconds")
    p.add_argument("--snrs", type=snr_list, default=list(ev.PROTOCOL_SNRS), help="start:stop:step inclusive")
    p.add_argument("--label", default=None, help="condition label for the CSV")
    p.add_argument("--jobs", type=positive_int, default=1, help="parallel worker processes")
    p.add_argument("--out", required=True, help="summary CSV")
    p.add_argument("--seed", type=nonneg_int, default=100, help="toy set seed")

    p = sub.add_parser("bench", help="per-hop real-time factor of the streaming path")
    _add_pipeline_flags(p)
    p.add_argument("--seconds", type=positive_float, default=5.0, help="audio length to time")
    p.add_argument("--csv", help="append a CSV row to this file")
    p.add_argument("--seed", type=nonneg_int, default=0, help="input noise and untrained-weight seed")

    p = sub.add_parser("gradcheck", help="finite-difference check of the training losses")
    p.add_argument("--loss", choices=gradsuite.CASES + ("all",), default="all", help="loss case")
    p.add_argument("--probes", type=positive_int, default=50, help="probes per loss")
    p.add_argument("--tol", type=positive_float, default=1e-4, help="relative error tolerance")
    p.add_argument("--out", help="write the probe table to this file")
    p.add_argument("--seed", type=nonneg_int, default=0, help="probe and data seed")
    return parser


# commands

def _fit_length(noise: np.ndarray, n: int, offset: int) -> np.ndarray:
    reps = -(-(n + offset) // len(noise))
    return np.tile(noise, reps)[offset: offset + n]


def cmd_mix(a):
    speech, noise = wav_read(a.speech), wav_read(a.noise)
    offset = a.seed % len(noise)
    noise = AudioBuffer(_fit_length(noise.samples, len(speech), offset), noise.sample_rate)
    wav_write(a.out, ev.mix_at_snr(speech, noise, a.snr))
    print(f"wrote {a.out} at {a.snr:g} dB SNR")


def cmd_enhance(a):
    cfg = pipeline.PipelineConfig(mode=a.mode, postfilter=a.postfilter, weights=a.weights)
    info = pipeline.enhance_file(a.inp, a.out, cfg)
    print(f"wrote {a.out} frames={info['frames']} rtf={info['rtf']:.4f}")


def cmd_oracle(a):
    if (a.speech is None) != (a.noise is None):
        raise MelMaskError("give both --speech and --noise, or neither")
    if a.speech:
        clean, noise = wav_read(a.speech), wav_read(a.noise)
    else:
        clean, noise = train.synth_toy_dataset(1, 4.0, a.seed).pairs[0]
    report = oracle.oracle_sweep(clean, noise, a.snrs)
    report.write_csv(a.out)
    print(f"wrote {a.out} ({len(report.rows)} rows)")


def cmd_train(a):
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = train.synth_toy_dataset(a.pairs, a.duration, a.seed)
    cfg = train.TrainConfig(seed=a.seed, learning_rate=a.lr, steps_per_phase=a.steps,
                            batch_frames=a.batch_frames, beta=a.beta, p=a.p, postfilter_enabled=a.postfilter)
    schemes = train.SCHEMES if a.scheme == "all" else (a.scheme,)
    results = []
    for scheme in schemes:
        r = train.run_scheme(scheme, data, cfg)
        train.save_checkpoint(r, out)
        print(f"{scheme}: sisdr_in={r.sisdr_in:.2f} dB sisdr_out={r.sisdr_out:.2f} dB")
        results.append(r)
    train.write_curves_csv(out / "curves.csv", results)
    train.write_summary_csv(out / "summary.csv", results)


def _wav_dir(path):
    files = sorted(Path(path).glob("*.wav"))
    if not files:
        raise MelMaskError(f"no .wav files in {path}")
    return [wav_read(f) for f in files]


def cmd_eval(a):
    cfg = pipeline.PipelineConfig(mode=a.mode, postfilter=a.postfilter, weights=a.weights)
    enhancer = pipeline.Enhancer(cfg)
    if a.speech_dir or a.noise_dir:
        if not (a.speech_dir and a.noise_dir):
            raise MelMaskError("give both --speech-dir and --noise-dir")
        speech, noise = _wav_dir(a.speech_dir), _wav_dir(a.noise_dir)
        pairs = [(s, AudioBuffer(_fit_length(n.samples, len(s), 0), n.sample_rate))
                 for s, n in zip(speech, noise)]
    else:
        pairs = train.synth_toy_dataset(a.pairs, a.duration, a.seed).pairs
    rows = ev.evaluate(enhancer, pairs, a.snrs, a.label, jobs=a.jobs)
    summary = ev.summarize(rows)
    ev.write_summary_csv(a.out, summary)
    for s in summary:
        print(f"{s.label} {s.snr_db:g} dB: in {s.sisdr_in_mean:.2f} out {s.sisdr_out_mean:.2f} +- {s.ci95:.2f}")


def cmd_bench(a):
    if a.weights:
        cfg = pipeline.PipelineConfig(mode=a.mode, postfilter=a.postfilter, weights=a.weights)
        enhancer = pipeline.Enhancer(cfg)
    else:
        # timing does not depend on the weight values
        cfg = pipeline.PipelineConfig(mode=a.mode, postfilter=a.postfilter)
        enhancer = pipeline.Enhancer(cfg, nn.build_stage1(a.seed), nn.build_stage2(a.seed + 1))
    report = pipeline.bench_rtf(enhancer, a.seconds, a.seed)
    print(report.to_text())
    if a.csv:
        new = not Path(a.csv).exists()
        with open(a.csv, "a") as fh:
            if new:
                fh.write(pipeline.RTF_CSV_HEADER + "\n")
            fh.write(report.to_csv_row() + "\n")


def cmd_gradcheck(a):
    cases = gradsuite.CASES if a.loss == "all" else (a.loss,)
    failed, tables = [], []
    for name in cases:
        rep = gradsuite.run_case(name, a.seed, a.probes)
        ok = rep.max_rel_error <= a.tol
        print(f"{name}: {'PASS' if ok else 'FAIL'} max_rel_error={rep.max_rel_error:.3e} "
              f"checked={rep.n_checked} skipped={rep.n_skipped}")
        tables.append(f"# {name}\n{rep.to_text()}")
        if not ok:
            failed.append(name)
    if a.out:
        Path(a.out).write_text("\n".join(tables) + "\n")
    if failed:
        raise MelMaskError(f"gradient check failed for {', '.join(failed)}")


def _glue_negative_values(argv):
    """``--snrs -5:30:5`` -> ``--snrs=-5:30:5`` so argparse does not read a flag."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in ("--snr", "--snrs") and i + 1 < len(argv) and argv[i + 1][:1] == "-" \
                and argv[i + 1][1:2].isdigit():
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


COMMANDS = {"mix": cmd_mix, "enhance": cmd_enhance, "oracle": cmd_oracle, "train": cmd_train,
            "eval": cmd_eval, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    level = os.environ.get("MELMASK2_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    argv = _glue_negative_values(list(sys.argv[1:] if argv is None else argv))
    args = build_parser().parse_args(argv)  # exits with 2 on usage errors
    try:
        COMMANDS[args.command](args)
    except (MelMaskError, OSError) as exc:
        print(f"melmask2 {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
