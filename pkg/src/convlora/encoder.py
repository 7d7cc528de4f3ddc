"""Miniature plain ViT with adapters on the query, key and value projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import AdaptedLinear, ConvLoRAAdapter, EvalCounter, adapter_param_count
from .errors import ConfigError
from .nn import MLP, LayerNorm, Linear, Module, parameter
from .tensor import Tensor

POLICIES = ("decoder-only", "peft", "full", "from-scratch")


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0
    in_channels: int = 3
    adapter: str = "none"  # none | lora | conv-lora | multi-scale
    rank: int = 3
    n_experts: int = 8
    scales: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7, 8])
    top_k: int = 1
    gate_init_std: float | None = None
    expert_init: str = "identity"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        if self.adapter not in ("none", "lora", "conv-lora", "multi-scale"):
            raise ConfigError(f"unknown adapter variant {self.adapter!r}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class ForwardState:
    """Side outputs of one encoder pass."""

    attn: list = field(default_factory=list)  # per layer, B x h x L x L arrays
    hidden: list = field(default_factory=list)  # per layer, B x d x g x g arrays
    decisions: list = field(default_factory=list)  # (layer, proj, GateDecision)
    counter: EvalCounter = field(default_factory=EvalCounter)


class Block(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, adapter_rng: np.random.Generator):
        d = cfg.dim
        self.heads = cfg.heads
        self.norm1 = LayerNorm(d)
        bound = 1.0 / np.sqrt(d)
        projections = []
        for _ in range(3):
            w = rng.uniform(-bound, bound, (d, d))
            b = np.zeros(d)
            adapter = None
            if cfg.adapter != "none":
                adapter = ConvLoRAAdapter(d, d, r=cfg.rank, n=cfg.n_experts, scales=cfg.scales,
                                          k=cfg.top_k, rng=adapter_rng, variant=cfg.adapter,
                                          gate_init_std=cfg.gate_init_std,
                                          expert_init=cfg.expert_init)
            projections.append(AdaptedLinear(w, b, adapter))
        self.q, self.k, self.v = projections
        self.proj = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP([d, int(d * cfg.mlp_ratio), d], rng, act=T.gelu)

    def forward(self, x: Tensor, grid, state: ForwardState, layer: int, rng=None) -> Tensor:
        B, L, d = x.shape
        h = self.heads
        dh = d // h
        y = self.norm1(x)
        qkv = []
        for name, lin in (("q", self.q), ("k", self.k), ("v", self.v)):
            log: list = []
            out = lin(y, grid, rng, state.counter, log)
            for dec in log:
                state.decisions.append((layer, name, dec))
            qkv.append(T.transpose(T.reshape(out, (B, L, h, dh)), (0, 2, 1, 3)))
        q, k, v = qkv
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        state.attn.append(attn.data.copy())
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
        x = x + self.proj(ctx)
        return x + self.mlp(self.norm2(x))


class MiniViT(Module):
    """Patch embedding, learned positions, pre-norm blocks, final norm; no class token."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, adapter_seed: int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        adapter_rng = np.random.default_rng(seed + 7919 if adapter_seed is None else adapter_seed)
        p = cfg.patch_size
        self.patch_embed = Linear(cfg.in_channels * p * p, cfg.dim, rng)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, (cfg.n_tokens, cfg.dim)))
        self.blocks = [Block(cfg, rng, adapter_rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        B, C, S, _ = images.shape
        p = self.cfg.patch_size
        g = S // p
        x = images.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(B, g * g, C * p * p)

    def forward(self, images, rng: np.random.Generator | None = None,
                state: ForwardState | None = None) -> tuple[Tensor, ForwardState]:
        cfg = self.cfg
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if data.ndim != 4 or data.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ConfigError(f"expected images B x {cfg.in_channels} x {cfg.image_size} x "
                              f"{cfg.image_size}, got {data.shape}")
        state = state or ForwardState()
        grid = cfg.grid
        x = self.patch_embed(Tensor(self.patchify(data))) + self.pos_embed
        for i, blk in enumerate(self.blocks):
            x = blk(x, grid, state, i, rng)
            state.hidden.append(x.data.transpose(0, 2, 1).reshape((x.shape[0], cfg.dim) + grid))
        x = self.norm(x)
        B = x.shape[0]
        feats = T.reshape(T.transpose(x, (0, 2, 1)), (B, cfg.dim) + grid)
        return feats, state

    def adapters(self) -> list[ConvLoRAAdapter]:
        return [lin.adapter for b in self.blocks for lin in (b.q, b.k, b.v) if lin.adapter is not None]


def vit_forward(images, model: MiniViT, rng=None) -> tuple[Tensor, list[np.ndarray]]:
    feats, state = model(images, rng)
    return feats, state.attn


def is_adapter_param(name: str) -> bool:
    return ".adapter." in name


def apply_freeze(model: Module, policy: str) -> dict[str, bool]:
    """Set ``requires_grad`` per parameter and return the trainable mask.

    ``model`` has ``encoder`` and ``decoder`` attributes.  Under ``peft`` the
    trainable set is every adapter parameter plus the decoder.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown freeze policy {policy!r}; expected one of {POLICIES}")
    mask = {}
    for name, p in model.named_parameters():
        in_decoder = name.startswith("decoder.")
        if policy in ("full", "from-scratch"):
            flag = True
        elif policy == "decoder-only":
            flag = in_decoder and not is_adapter_param(name)
        else:
            flag = in_decoder or is_adapter_param(name)
        p.requires_grad = flag
        mask[name] = flag
    return mask


def count_params(model: Module, mask: dict[str, bool]) -> tuple[int, int, float]:
    total = trainable = 0
    for name, p in model.named_parameters():
        total += p.size
        if mask.get(name, False):
            trainable += p.size
    return trainable, total, trainable / total


def encoder_param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count of the frozen backbone (adapters excluded)."""
    d, p, L = cfg.dim, cfg.patch_size, cfg.depth
    hidden = int(d * cfg.mlp_ratio)
    per_block = 2 * 2 * d + 3 * (d * d + d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    return cfg.in_channels * p * p * d + d + cfg.n_tokens * d + L * per_block + 2 * d


def adapter_total(cfg: EncoderConfig) -> int:
    if cfg.adapter == "none":
        return 0
    return 3 * cfg.depth * adapter_param_count(cfg.dim, cfg.dim, cfg.rank, cfg.n_experts, cfg.adapter)
