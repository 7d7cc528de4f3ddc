"""
Inspection instruments
======================

Mean attention distance, the relative log amplitude of feature spectra, and
how often each expert is selected.
"""

import numpy as np

from convlora.analysis import expert_utilization, fourier_log_amplitude, mean_attention_distance
from convlora.config import RunConfig
from convlora.data import gen_synthetic
from convlora.training import build_model, predict

# closed forms first
print("uniform attention, 2x2 grid:",
      mean_attention_distance(np.full((1, 1, 4, 4), 0.25), (2, 2)).distances[0, 0])
impulse = np.zeros((1, 1, 8, 8))
impulse[0, 0, 2, 3] = 1
print("impulse spectrum:", fourier_log_amplitude(impulse).rel_log_amp.round(9))

# then a fresh Conv-LoRA model on a few test scenes
cfg = RunConfig(variant="conv-lora")
model, _ = build_model(cfg)
images = gen_synthetic(cfg.data, 0, "test").images[:8]
_, _, states = predict(cfg, model, images)
st = states[0]
print("attention distance per layer/head\n", mean_attention_distance(st.attn, (8, 8)).distances.round(3))
spec = fourier_log_amplitude(st.hidden)
print("radius", spec.radius.round(2))
print("rel log amplitude per layer\n", spec.rel_log_amp.round(2))
hist = expert_utilization(st.decisions, 8)
print("expert counts", hist.counts, "cv", round(hist.cv, 3))
