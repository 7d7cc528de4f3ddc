"""LoRA and Conv-LoRA adapters.

Conv-LoRA keeps LoRA's encoder/decoder pair around a frozen projection and
inserts a sparse mixture of convolutional experts in the rank-r bottleneck.
Expert ``i`` resamples the bottleneck map by ``s_i``, applies a 3x3
convolution and resamples back to the original grid.  A per-sample gate pools
the bottleneck map, scores every expert (plus softplus-scaled Gaussian noise
while training), keeps the top ``k`` scores and softmaxes them.

The functional API works on NCHW maps.  :class:`AdaptedLinear` wraps a frozen
projection inside a transformer block, where the token sequence is reshaped to
its patch grid before the bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Module, parameter
from .tensor import Tensor

VARIANTS = ("none", "lora", "conv-lora", "multi-scale")


@dataclass
class LoRAWeights:
    W_e: Tensor  # r x C_in
    W_d: Tensor  # C_out x r

    @property
    def rank(self) -> int:
        return self.W_e.shape[0]


@dataclass
class ExpertParams:
    scale: float
    kernel: Tensor  # r x r x 3 x 3
    bias: Tensor  # r


@dataclass
class GateParams:
    W_g: Tensor  # r x n
    W_noise: Tensor  # r x n
    k: int = 1
    noise_enabled: bool = False

    @property
    def n_experts(self) -> int:
        return self.W_g.shape[1]


@dataclass
class GateDecision:
    """Gate output for one batch at one adapter.

    ``gates`` rows sum to one with exactly ``k`` nonzeros; ``scores`` are the
    raw (possibly noisy) expert scores; ``probs`` is the softmax over all
    scores before top-k masking.
    """

    gates: Tensor
    scores: np.ndarray
    probs: Tensor

    @property
    def active(self) -> list[np.ndarray]:
        return [np.flatnonzero(row > 0) for row in self.gates.data]

    @property
    def selected(self) -> np.ndarray:
        """Boolean B x n selection mask."""
        return self.gates.data > 0


@dataclass
class EvalCounter:
    """Counts expert evaluations (one per sample routed through an expert)."""

    count: int = 0
    per_expert: dict = field(default_factory=dict)

    def add(self, expert: int, n: int) -> None:
        self.count += n
        self.per_expert[expert] = self.per_expert.get(expert, 0) + n


def _check_rank(r: int, c_in: int, c_out: int) -> None:
    if not 0 < r < min(c_in, c_out):
        raise ConfigError(f"rank must satisfy 0 < r < min(C_in, C_out) = {min(c_in, c_out)}, got {r}")


def channel_linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply an (out, in) matrix to the channel axis of an NCHW map."""
    y = T.linear(T.transpose(x, (0, 2, 3, 1)), W, b)
    return T.transpose(y, (0, 3, 1, 2))


def lora_forward(x: Tensor, W0: Tensor, lw: LoRAWeights) -> Tensor:
    """``W0 x + W_d W_e x`` per spatial position."""
    _check_rank(lw.rank, W0.shape[1], W0.shape[0])
    return channel_linear(x, W0) + channel_linear(channel_linear(x, lw.W_e), lw.W_d)


def expert_forward(z: Tensor, e: ExpertParams) -> Tensor:
    """Resample by ``e.scale``, 3x3 conv, resample back to the input grid."""
    H, W = z.shape[2:]
    up = T.interpolate_bilinear(z, scale=e.scale)
    y = T.conv3x3(up, e.kernel, e.bias)
    return T.interpolate_bilinear(y, size=(H, W))


def keep_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the top ``k`` entries per row; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    keep = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    return keep


def gate_scores(z: Tensor, g: GateParams, rng: np.random.Generator | None = None) -> GateDecision:
    """Noisy top-k softmax gate on the pooled bottleneck map."""
    n = g.n_experts
    if not 1 <= g.k <= n:
        raise ConfigError(f"top-k must satisfy 1 <= k <= n = {n}, got {g.k}")
    x_h = T.global_avg_pool(z)  # B x r
    H = T.matmul(x_h, g.W_g)
    if g.noise_enabled:
        if rng is None:
            raise ConfigError("gate noise is enabled but no rng was supplied")
        eps = rng.standard_normal(H.shape)
        H = H + T.mul(T.softplus(T.matmul(x_h, g.W_noise)), eps)
    keep = keep_top_k(H.data, g.k)
    gates = T.softmax(T.masked_fill_neg_inf(H, keep), axis=1)
    probs = T.softmax(H, axis=1)
    return GateDecision(gates=gates, scores=H.data.copy(), probs=probs)


def moe_mix(z: Tensor, experts: Sequence[ExpertParams], g: GateParams,
            rng: np.random.Generator | None = None,
            counter: EvalCounter | None = None) -> tuple[Tensor, GateDecision]:
    """Gate-weighted sum of experts, evaluating each expert only on its routed samples."""
    if not experts:
        raise ConfigError("Conv-LoRA needs at least one expert")
    if len(experts) != g.n_experts:
        raise ConfigError(f"{len(experts)} experts but gate scores {g.n_experts}")
    decision = gate_scores(z, g, rng)
    B = z.shape[0]
    out = None
    for j, e in enumerate(experts):
        rows = np.flatnonzero(decision.gates.data[:, j] > 0)
        if rows.size == 0:
            continue
        if counter is not None:
            counter.add(j, rows.size)
        y = expert_forward(T.take_rows(z, rows), e)
        w = T.reshape(T.getitem(decision.gates, (rows, j)), (rows.size, 1, 1, 1))
        term = T.put_rows(y * w, rows, B)
        out = term if out is None else out + term
    return out, decision


def multiscale_mix(z: Tensor, experts: Sequence[ExpertParams],
                   counter: EvalCounter | None = None) -> Tensor:
    """Mean of every expert's output, no gate."""
    if not experts:
        raise ConfigError("multi-scale fusion needs at least one expert")
    out = None
    for j, e in enumerate(experts):
        if counter is not None:
            counter.add(j, z.shape[0])
        y = expert_forward(z, e)
        out = y if out is None else out + y
    return out * (1.0 / len(experts))


def conv_lora_forward(x: Tensor, W0: Tensor, lw: LoRAWeights, experts: Sequence[ExpertParams],
                      g: GateParams, rng: np.random.Generator | None = None,
                      counter: EvalCounter | None = None) -> tuple[Tensor, GateDecision]:
    """``W0 x + W_d (sum_i G(W_e x)_i E_i(W_e x))`` on an NCHW map."""
    _check_rank(lw.rank, W0.shape[1], W0.shape[0])
    z = channel_linear(x, lw.W_e)
    mixed, decision = moe_mix(z, experts, g, rng, counter)
    return channel_linear(x, W0) + channel_linear(mixed, lw.W_d), decision


def multiscale_forward(x: Tensor, W0: Tensor, lw: LoRAWeights, experts: Sequence[ExpertParams],
                       counter: EvalCounter | None = None) -> Tensor:
    _check_rank(lw.rank, W0.shape[1], W0.shape[0])
    z = channel_linear(x, lw.W_e)
    return channel_linear(x, W0) + channel_linear(multiscale_mix(z, experts, counter), lw.W_d)


def importance(decisions: Sequence[GateDecision], source: str = "gates") -> Tensor:
    """Per-expert gate mass summed over samples and adapters."""
    total = None
    for d in decisions:
        m = T.tsum(d.gates if source == "gates" else d.probs, axis=0)
        total = m if total is None else total + m
    return total


def moe_balance_loss(decisions: Sequence[GateDecision], weight: float,
                     source: str = "gates") -> Tensor:
    """``weight * CV(importance)^2`` with the population standard deviation.

    ``source="probs"`` measures importance on the dense pre-top-k softmax,
    which still carries gradient when ``k == 1``.
    """
    if source not in ("gates", "probs"):
        raise ValueError(f"unknown importance source {source!r}")
    if not decisions:
        return Tensor(0.0)
    imp = importance(decisions, source)
    mu = T.mean(imp)
    var = T.mean((imp - mu) ** 2)
    return var / (mu * mu) * weight


# ----------------------------------------------------------------------------
# modules


class ConvLoRAAdapter(Module):
    """Trainable side of one adapted projection: LoRA pair, experts and gate."""

    def __init__(self, c_in: int, c_out: int, r: int = 3, n: int = 8,
                 scales: Sequence[float] | None = None, k: int = 1,
                 rng: np.random.Generator | None = None, variant: str = "conv-lora",
                 gate_init_std: float | None = None, expert_init: str = "identity"):
        if expert_init not in ("normal", "identity"):
            raise ConfigError(f"unknown expert init {expert_init!r}")
        if variant not in ("lora", "conv-lora", "multi-scale"):
            raise ConfigError(f"unknown adapter variant {variant!r}")
        _check_rank(r, c_in, c_out)
        scales = list(range(1, n + 1)) if scales is None else [float(s) for s in scales]
        if variant != "lora":
            if n < 1 or len(scales) != n:
                raise ConfigError(f"need n >= 1 experts with one scale each, got n={n}, scales={scales}")
            if any(not s > 0 for s in scales):
                raise ConfigError(f"expert scales must be positive, got {scales}")
            if not 1 <= k <= n:
                raise ConfigError(f"top-k must satisfy 1 <= k <= n, got k={k}, n={n}")
        rng = rng or np.random.default_rng(0)
        self.variant = variant
        self.rank = r
        self.k = k
        self.W_e = parameter(rng.normal(0.0, 1.0 / np.sqrt(c_in), (r, c_in)))
        self.W_d = parameter(np.zeros((c_out, r)))
        self.kernels: list[Tensor] = []
        self.biases: list[Tensor] = []
        self._scales: list[float] = []
        if variant != "lora":
            self._scales = scales
            for _ in range(n):
                kernel = rng.normal(0.0, 1.0 / (3 * np.sqrt(r)), (r, r, 3, 3))
                if expert_init == "identity":
                    kernel[np.arange(r), np.arange(r), 1, 1] += 1.0
                self.kernels.append(parameter(kernel))
                self.biases.append(parameter(np.zeros(r)))
        if variant == "conv-lora":
            std = 1.0 / np.sqrt(r) if gate_init_std is None else gate_init_std
            self.W_g = parameter(rng.normal(0.0, std, (r, n)) if std > 0 else np.zeros((r, n)))
            self.W_noise = parameter(np.zeros((r, n)))

    @property
    def scales(self) -> list[float]:
        return list(self._scales)

    @property
    def lora(self) -> LoRAWeights:
        return LoRAWeights(self.W_e, self.W_d)

    @property
    def experts(self) -> list[ExpertParams]:
        return [ExpertParams(s, k, b) for s, k, b in zip(self._scales, self.kernels, self.biases)]

    def gate(self, noise: bool) -> GateParams:
        return GateParams(self.W_g, self.W_noise, self.k, noise_enabled=noise)

    def delta(self, x: Tensor, grid: tuple[int, int], rng: np.random.Generator | None = None,
              counter: EvalCounter | None = None) -> tuple[Tensor, GateDecision | None]:
        """Low-rank update for tokens ``x`` (B x L x C_in) laid out on ``grid``."""
        z = T.linear(x, self.W_e)  # B x L x r
        if self.variant == "lora":
            return T.linear(z, self.W_d), None
        B, L, r = z.shape
        zmap = T.reshape(T.transpose(z, (0, 2, 1)), (B, r) + tuple(grid))
        decision = None
        if self.variant == "conv-lora":
            noisy = self.training and rng is not None
            mixed, decision = moe_mix(zmap, self.experts, self.gate(noisy), rng if noisy else None, counter)
        else:
            mixed = multiscale_mix(zmap, self.experts, counter)
        tok = T.transpose(T.reshape(mixed, (B, r, L)), (0, 2, 1))
        return T.linear(tok, self.W_d), decision


class AdaptedLinear(Module):
    """Frozen projection ``W0 x + b0`` with an optional adapter alongside."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, adapter: ConvLoRAAdapter | None = None):
        self.weight = parameter(weight)
        self.bias = parameter(bias)
        self.adapter = adapter

    def forward(self, x: Tensor, grid: tuple[int, int], rng=None, counter=None,
                log: list | None = None) -> Tensor:
        out = T.linear(x, self.weight, self.bias)
        if self.adapter is None:
            return out
        d, decision = self.adapter.delta(x, grid, rng, counter)
        if decision is not None and log is not None:
            log.append(decision)
        return out + d


def init_adapter(c_in: int, c_out: int, r: int = 3, n: int = 8, scales: Sequence[float] | None = None,
                 seed: int = 0, k: int = 1, variant: str = "conv-lora",
                 gate_init_std: float | None = None, expert_init: str = "identity") -> ConvLoRAAdapter:
    """Fresh adapter; defaults are 8 experts at scales 1..8, top-1, rank 3."""
    return ConvLoRAAdapter(c_in, c_out, r=r, n=n, scales=scales, k=k,
                           rng=np.random.default_rng(seed), variant=variant,
                           gate_init_std=gate_init_std, expert_init=expert_init)


def adapter_param_count(c_in: int, c_out: int, r: int, n: int, variant: str = "conv-lora") -> int:
    """Trainable parameters in one adapter, by closed form."""
    count = r * c_in + c_out * r
    if variant in ("conv-lora", "multi-scale"):
        count += n * (9 * r * r + r)
    if variant == "conv-lora":
        count += 2 * r * n
    return count
