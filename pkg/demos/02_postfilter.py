"""
The sine post-filter and the gain power
=======================================

The post-filter g' = g sin(pi g / 2) leaves 0 and 1 alone and pushes every
gain in between further down. A stage-1 model trained with p = 2 tends to
overestimate small gains, which the post-filter then suppresses.
"""

import numpy as np

from melmask2 import Enhancer, PipelineConfig, TrainConfig, build_stage1, synth_toy_dataset, train_stage1
from melmask2.pipeline import sin_postfilter
from melmask2.train import EVAL_SNRS, toy_sisdr

g = np.array([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0])
print("g      :", g)
print("g'     :", np.round(sin_postfilter(g), 4))

train_set = synth_toy_dataset(8, 2.0, seed=0)
test_set = synth_toy_dataset(8, 2.0, seed=100)

for p in (0.5, 2.0):
    # 200 Adam steps on 32-frame crops, about ten seconds on one core
    model, curve = train_stage1(build_stage1(0), train_set, "Lg", TrainConfig(p=p, batch_frames=32))
    for pf in (False, True):
        enh = Enhancer(PipelineConfig(mode="stage1_only", postfilter=pf), model)
        noisy, out = toy_sisdr(enh, test_set, EVAL_SNRS)
        print(f"p={p}  post-filter={'on ' if pf else 'off'}  SI-SDR {noisy:5.2f} -> {out:5.2f} dB")
