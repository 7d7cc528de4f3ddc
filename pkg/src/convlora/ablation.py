"""Ablation drivers: gated vs dense experts, single-expert scale sweep, rank sweep.

Each suite trains a grid of variants over shared seeds and writes one CSV row
per run with the test metrics, trainable-parameter count, expert-evaluation
count and median wall-clock per training step.
"""

from __future__ import annotations

import copy
import csv
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapters import ConvLoRAAdapter, EvalCounter, moe_balance_loss
from .analysis import expert_utilization
from .config import RunConfig
from .encoder import count_params
from .errors import ConfigError
from .optim import Adam
from .training import primary_metric, train

log = logging.getLogger(__name__)

SUITES = ("moe-vs-multiscale", "scale-sweep", "rank-sweep")
SWEEP_SCALES = (1.0, 2.0, 4.0, 8.0)
SWEEP_RANKS = (3, 6, 12, 24)

# Two scene distributions that differ only in object size.
SCALE_DATASETS = {
    "small-objects": dict(radius_dist="uniform", r_min=2.0, r_max=6.0, max_objects=3),
    "large-objects": dict(radius_dist="uniform", r_min=14.0, r_max=24.0, max_objects=1),
}

FIELDS = ("suite", "dataset", "variant", "seed", "scale", "rank", "metric", "value",
          "trainable_params", "expert_evals", "steps", "sec_per_step", "iter_per_sec")


def _grid(suite: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    runs = []
    if suite == "moe-vs-multiscale":
        for v in ("conv-lora", "multi-scale"):
            cfg = copy.deepcopy(base)
            cfg.variant = v
            runs.append(("base", cfg))
    elif suite == "scale-sweep":
        for name, overrides in SCALE_DATASETS.items():
            for s in SWEEP_SCALES:
                cfg = copy.deepcopy(base)
                cfg.variant = "single-expert"
                cfg.adapter.scales = [s]
                cfg.adapter.top_k = 1
                for k, v in overrides.items():
                    setattr(cfg.data, k, v)
                runs.append((name, cfg))
    elif suite == "rank-sweep":
        for r in SWEEP_RANKS:
            cfg = copy.deepcopy(base)
            cfg.variant = "conv-lora"
            cfg.adapter.rank = r
            runs.append(("base", cfg))
    else:
        raise ConfigError(f"unknown ablation suite {suite!r}; expected one of {SUITES}")
    return runs


def ablation_driver(suite: str, base: RunConfig | None = None, seeds: Sequence[int] = (0,),
                    out=None) -> list[dict]:
    """Run ``suite`` for every seed; returns the rows and writes ``<out>/<suite>.csv``."""
    base = base or RunConfig()
    grid = _grid(suite, base)
    rows = []
    for seed in seeds:
        for dataset, cfg in grid:
            cfg = copy.deepcopy(cfg)
            cfg.seed = seed
            cfg.validate()
            res = train(cfg, write=False)
            trainable, _, _ = count_params(res.model, res.mask)
            step = float(np.median(res.step_times)) if res.step_times else float("nan")
            key = primary_metric(cfg)
            rows.append({
                "suite": suite, "dataset": dataset, "variant": cfg.variant, "seed": seed,
                "scale": cfg.adapter.scales[0] if cfg.variant == "single-expert" else "",
                "rank": cfg.adapter.rank, "metric": key, "value": res.test[key],
                "trainable_params": trainable, "expert_evals": res.expert_evals,
                "steps": res.steps, "sec_per_step": step, "iter_per_sec": 1.0 / step,
            })
            log.info("%s %s %s seed=%d %s=%.4f", suite, dataset, cfg.variant, seed, key, res.test[key])
    if out is not None:
        write_ablation_csv(Path(out) / f"{suite}.csv", rows)
    return rows


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, FIELDS)
        w.writeheader()
        w.writerows(rows)


def best_scale(rows: Sequence[dict], dataset: str, seed: int) -> float:
    """Scale with the highest test metric for one dataset and seed; ties go to the smaller scale."""
    cand = [r for r in rows if r["dataset"] == dataset and r["seed"] == seed]
    if not cand:
        raise ValueError(f"no scale-sweep rows for {dataset!r}, seed {seed}")
    return max(cand, key=lambda r: (r["value"], -r["scale"]))["scale"]


def balance_experiment(seed: int, weight: float, steps: int = 500, n: int = 8, k: int = 1,
                       batch: int = 16, source: str = "probs") -> float:
    """Utilization CV of one adapter after ``steps`` of training on random inputs.

    The task term regresses the adapter output onto a fixed random linear
    target; ``weight`` scales the balance term.  Utilization is measured with
    the noise-free gate on 512 fresh inputs.
    """
    c, r, g = 8, 3, (4, 4)
    rng = np.random.default_rng([seed, 0])
    adapter = ConvLoRAAdapter(c, c, r=r, n=n, k=k, rng=rng)
    target = rng.normal(size=(c, c)) / np.sqrt(c)
    opt = Adam(adapter.parameters(), lr=1e-2)
    noise = np.random.default_rng([seed, 1])
    data = np.random.default_rng([seed, 2])
    L = g[0] * g[1]

    def sample(m):
        # per-sample offsets give the pooled gate input something to route on
        return data.normal(size=(m, L, c)) + data.normal(size=(m, 1, c))

    adapter.train()
    for _ in range(steps):
        x = T.Tensor(sample(batch))
        d, dec = adapter.delta(x, g, noise)
        task = T.mean((d - x.data @ target.T) ** 2)
        loss = task + moe_balance_loss([dec], weight, source) if weight else task
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    adapter.eval()
    with T.no_grad():
        _, dec = adapter.delta(T.Tensor(sample(512)), g, None, EvalCounter())
    return expert_utilization([dec], n).cv
