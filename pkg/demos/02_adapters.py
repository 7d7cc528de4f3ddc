"""
LoRA and Conv-LoRA adapters
===========================

A frozen channel projection ``W0`` gets a low-rank update.  Conv-LoRA
routes each sample's rank-r bottleneck map through one of several
resample-conv-resample experts, chosen by a top-k gate.
"""

import numpy as np

from convlora import adapters as A
from convlora.tensor import Tensor

rng = np.random.default_rng(0)
C, H, W = 16, 8, 8
x = Tensor(rng.normal(size=(4, C, H, W)))
W0 = Tensor(rng.normal(size=(C, C)) / 4)

ad = A.init_adapter(C, C, r=3, n=8, seed=1)
print("expert scales", ad.scales)

# the decoder half starts at zero, so a fresh adapter is the frozen map
out, decision = A.conv_lora_forward(x, W0, ad.lora, ad.experts, ad.gate(noise=False))
print("max |fresh - frozen|", np.abs(out.data - A.channel_linear(x, W0).data).max())
print("gates\n", decision.gates.data.round(3))

# give the decoder some weight and compare against evaluating every expert
ad.W_d.data[...] = rng.normal(size=ad.W_d.shape)
counter = A.EvalCounter()
moe, _ = A.conv_lora_forward(x, W0, ad.lora, ad.experts, ad.gate(False), counter=counter)
dense = A.EvalCounter()
A.multiscale_forward(x, W0, ad.lora, ad.experts, counter=dense)
print("expert evaluations: gated", counter.count, "dense", dense.count)

# the balance term: zero when every expert gets equal mass, n - 1 when one takes all
one_hot = np.zeros((5, 8))
one_hot[:, 2] = 1
print("CV^2 of one-hot importance", A.moe_balance_loss(
    [A.GateDecision(Tensor(one_hot), one_hot, Tensor(one_hot))], 1.0).item())

print("trainable params per adapter: lora", A.adapter_param_count(C, C, 3, 8, "lora"),
      "conv-lora", A.adapter_param_count(C, C, 3, 8, "conv-lora"))
