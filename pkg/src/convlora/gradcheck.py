"""Finite-difference gradient suite over every differentiable op and the Conv-LoRA layer."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .adapters import ExpertParams, GateParams, LoRAWeights, conv_lora_forward, multiscale_forward
from .seg import structure_loss
from .tensor import Tensor

TOLERANCE = 1e-4


def _conv_lora_case(r):
    c_in, c_out, rank, n = 5, 4, 2, 3
    arrays = [r.normal(size=(2, c_in, 3, 4)), r.normal(size=(rank, c_in)), r.normal(size=(c_out, rank)),
              r.normal(size=(rank, n))]
    arrays += [r.normal(size=(rank, rank, 3, 3)) * 0.5 for _ in range(n)]
    arrays += [r.normal(size=rank) * 0.1 for _ in range(n)]
    W0 = Tensor(r.normal(size=(c_out, c_in)))

    def fn(x, W_e, W_d, W_g, *rest):
        experts = [ExpertParams(s, k, b) for s, k, b in zip((1.0, 1.5, 3.0), rest[:n], rest[n:])]
        gate = GateParams(W_g, Tensor(np.zeros((rank, n))), k=2, noise_enabled=False)
        out, _ = conv_lora_forward(x, W0, LoRAWeights(W_e, W_d), experts, gate)
        return out

    return arrays, fn


def _multiscale_case(r):
    arrays = [r.normal(size=(2, 4, 3, 3)), r.normal(size=(2, 4)), r.normal(size=(4, 2)),
              r.normal(size=(2, 2, 3, 3)), r.normal(size=2), r.normal(size=(2, 2, 3, 3)), r.normal(size=2)]
    W0 = Tensor(r.normal(size=(4, 4)))

    def fn(x, W_e, W_d, k1, b1, k2, b2):
        experts = [ExpertParams(1.0, k1, b1), ExpertParams(2.0, k2, b2)]
        return multiscale_forward(x, W0, LoRAWeights(W_e, W_d), experts)

    return arrays, fn


def _structure_case(r):
    gt = (r.random((2, 1, 9, 9)) > 0.5).astype(np.float64)
    return [r.normal(size=gt.shape)], lambda x: structure_loss(x, gt, window=5)


CASES: dict[str, Callable] = {
    "matmul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4, 2))], T.matmul),
    "linear": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(5, 4)), r.normal(size=5)], T.linear),
    "conv3x3": lambda r: ([r.normal(size=(2, 2, 4, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
                          T.conv3x3),
    "interpolate_up": lambda r: ([r.normal(size=(1, 2, 3, 4))], lambda x: T.interpolate_bilinear(x, 2.5)),
    "interpolate_down": lambda r: ([r.normal(size=(1, 2, 8, 6))],
                                   lambda x: T.interpolate_bilinear(x, size=(3, 4))),
    "softmax": lambda r: ([r.normal(size=(3, 5))], lambda x: T.softmax(x, axis=1)),
    "log_softmax": lambda r: ([r.normal(size=(3, 5))], lambda x: T.log_softmax(x, axis=1)),
    "softplus": lambda r: ([r.normal(size=7) * 3], T.softplus),
    "sigmoid": lambda r: ([r.normal(size=7) * 2], T.sigmoid),
    "gelu": lambda r: ([r.normal(size=7)], T.gelu),
    "relu": lambda r: ([r.normal(size=7) + np.sign(r.normal(size=7)) * 0.1], T.relu),
    "exp_log": lambda r: ([r.random(6) + 0.5], lambda x: T.log(T.exp(x) + x * x)),
    "layer_norm": lambda r: ([r.normal(size=(3, 6)), r.normal(size=6), r.normal(size=6)], T.layer_norm),
    "global_avg_pool": lambda r: ([r.normal(size=(2, 3, 4, 4))], T.global_avg_pool),
    "structure_loss": _structure_case,
    "multiscale_layer": _multiscale_case,
    "conv_lora_layer": _conv_lora_case,
}


def check_case(name: str, rng: np.random.Generator) -> float:
    arrays, fn = CASES[name](rng)
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*[Tensor(a) for a in arrays])
    weights = rng.normal(size=out.shape)
    return T.finite_diff_check(lambda: T.tsum(fn(*inputs) * weights), inputs)


def run_gradcheck(seeds: Iterable[int], names: Iterable[str] | None = None) -> dict[str, float]:
    """Max relative error per case over ``seeds``."""
    names = list(names or CASES)
    worst = {n: 0.0 for n in names}
    for seed in seeds:
        for i, name in enumerate(names):
            rng = np.random.default_rng([seed, i])
            worst[name] = max(worst[name], check_case(name, rng))
    return worst
