"""Two-stage low-latency speech enhancement: Mel masking, then complex refinement."""

from .errors import (FormatError, InvalidConfigError, InvalidInputError, MelMaskError, NumericError,
                     StateError, TrainingError, UnsupportedRateError)
from .signal import (SAMPLE_RATE, AudioBuffer, ComplexSpectrogram, StftConfig, istft, stft, wav_read,
                     wav_write)
from .mel import GainTensor, MelFilterBank, build_mel_filterbank, interpolate_gains, oracle_gains, to_mel
from .nn import (ModelGraph, build_stage1, build_stage2, count_params, forward, forward_frame,
                 load_weights, save_weights)
from .losses import (GradCheckReport, asym_loss, gain_loss, grad_check, loss_L1, loss_L2, mag_loss,
                     phase_loss, scale_factor, sisnr_loss)
from .pipeline import (Enhancer, PipelineConfig, RtfReport, StreamState, bench_rtf, enhance_file,
                       enhance_frame, sin_postfilter)
from .evalbench import EvalRow, evaluate, mix_at_snr, si_sdr, summarize
from .oracle import OracleReport, closest_noisy_phase, ideal_mag_noisy_phase, oracle_sweep
from .train import (SCHEMES, Adam, TrainConfig, ToyDataset, adam_step, run_scheme, synth_toy_dataset,
                    train_joint, train_stage1, train_stage2)

__version__ = "0.1.0"
