"""Run configuration and its structured-text file format.

The file holds ``section.key = value`` lines; ``[section]`` headers may be used
instead of the dotted prefix.  ``#`` starts a comment.  Sections map onto the
nested dataclasses of :class:`RunConfig`: ``run``, ``model``, ``adapter``,
``data`` and ``loss``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError
from .seg import LossWeights

VARIANTS = ("decoder-only", "lora", "conv-lora", "multi-scale", "single-expert", "full",
            "from-scratch")


@dataclass
class ModelConfig:
    patch_size: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0
    n_tokens: int = 1  # decoder output tokens; multiclass default raised to 16
    pretrain_steps: int = 0


@dataclass
class AdapterConfig:
    rank: int = 3
    n_experts: int = 8
    scales: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
    top_k: int = 1
    balance_weight: float = 1.0
    balance_source: str = "probs"  # probs | gates
    gate_init_std: float = -1.0  # negative: 1/sqrt(rank)
    expert_init: str = "identity"  # identity (delta kernel plus noise) | normal


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "conv-lora"
    task: str = "binary"  # binary | multiclass
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    flip: bool = True
    num_points: int = 1024
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.task not in ("binary", "multiclass"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "multiclass" and self.data.n_classes < 1:
            raise ConfigError("multiclass task needs data.n_classes >= 1")
        if self.task == "binary" and self.data.n_classes != 0:
            raise ConfigError("binary task needs data.n_classes = 0")
        if self.variant == "single-expert" and len(self.adapter.scales) != 1:
            raise ConfigError("single-expert variant takes exactly one scale")
        if self.adapter.expert_init not in ("identity", "normal"):
            raise ConfigError(f"unknown expert init {self.adapter.expert_init!r}")
        if self.adapter.balance_source not in ("probs", "gates"):
            raise ConfigError(f"unknown balance source {self.adapter.balance_source!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch size must be positive and epochs nonnegative")
        self.data.validate()


SECTIONS = {"run": None, "model": "model", "adapter": "adapter", "data": "data", "loss": "loss"}


def _coerce(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, list):
        return [float(x) for x in raw.replace("[", "").replace("]", "").split(",") if x.strip()]
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def set_value(cfg: RunConfig, dotted: str, raw) -> None:
    """Assign ``section.key`` (or a bare run-level key) from a string."""
    section, _, key = dotted.rpartition(".")
    section = section or "run"
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    target = cfg if SECTIONS[section] is None else getattr(cfg, SECTIONS[section])
    names = {f.name for f in dataclasses.fields(target)}
    key = key.replace("-", "_")
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    current = getattr(target, key)
    if isinstance(raw, str):
        value = _coerce(raw, current)
    else:
        value = raw
    setattr(target, key, value)


def parse_config(text: str) -> dict[str, str]:
    """Flatten a config file into ``{dotted key: raw string}``.

    Lines before the first header belong to ``[run]``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None,
                                   strict=False, default_section="\0")
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    values = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            values[key if section == "run" or "." in key else f"{section}.{key}"] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for k, v in parse_config(Path(path).read_text()).items():
            set_value(cfg, k, v)
    for k, v in (overrides or {}).items():
        set_value(cfg, k, v)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, attr in SECTIONS.items():
        target = cfg if attr is None else getattr(cfg, attr)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(target):
            v = getattr(target, f.name)
            if dataclasses.is_dataclass(v):
                continue
            if isinstance(v, list):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
